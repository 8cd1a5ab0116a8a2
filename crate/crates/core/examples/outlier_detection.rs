//! Coarse-to-fine outlier detection on weight magnitudes, then per-channel
//! scaling of an activation with an outlier channel.

use cbq::outlier::{channel_max_abs, detect, scale_activations, OutlierConfig};
use cbq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> cbq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = OutlierConfig::default();

    let mut mags: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x.abs()).collect();
    mags.extend([9.0, 11.5, 12.0]);
    let r = detect(&mags, &cfg)?;
    println!(
        "quartile threshold {:.3}: {} coarse candidates, {} outliers kept, reserved max {:.3}",
        r.threshold,
        r.coarse.len(),
        r.outliers.len(),
        r.reserved_max
    );
    println!("outliers {:?}", r.outliers);

    let (rows, c) = (32, 16);
    let mut x: Vec<f64> = (0..rows * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    for row in 0..rows {
        x[row * c + 5] *= 25.0;
    }
    let x = Tensor::matrix(rows, c, x)?;
    let w = Tensor::matrix(c, 4, (0..c * 4).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let (scales, w2, _) = scale_activations(&x, &w, &cfg)?;
    println!("channel maxima {:.2?}", channel_max_abs(&x));
    println!("scales         {:.2?}", scales.s);

    // the product is unchanged once the scale is folded into the weight
    let before = x.matmul(&w)?;
    let after = cbq::outlier::apply_scales(&x, &scales)?.matmul(&w2)?;
    println!("max |xW - (x/s)(sW)| = {:.2e}", before.sub(&after)?.max_abs());
    Ok(())
}
