//! Low-rank rounding compensation: a rank-r pair of factors decides, for
//! every weight, whether to round down or up.

use cbq::quant::{init_step, integer_codes, QuantSpec};
use cbq::rounding::{compensated_codes, default_rank, RoundingCompensation};
use cbq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> cbq::Result<()> {
    let (d, k) = (64, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = Tensor::matrix(d, k, (0..d * k).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let spec = QuantSpec::weight(4)?;
    let state = init_step(&w, &spec)?;

    let r = default_rank(d, k);
    let comp = RoundingCompensation::warm_start(&w, &state, r, &mut rng)?;
    println!(
        "{d}x{k} weight, rank {r}: {} learnable values instead of {}",
        comp.parameter_count(),
        d * k
    );

    let a = comp.binarized()?;
    let ups = a.data().iter().filter(|&&v| v == 1.0).count();
    println!("warm start rounds {ups} of {} entries up", d * k);

    let floor = integer_codes(&w, &state, &spec.with_rounding(cbq::quant::Rounding::Floor))?;
    let rounded = compensated_codes(&w, &state, &a, &spec)?;
    let changed = floor.values.iter().zip(&rounded.values).filter(|(f, c)| f != c).count();
    println!("{changed} codes differ from plain floor");
    Ok(())
}
