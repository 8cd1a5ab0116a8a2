//! Trains (or loads from a cache) the toy decoder and reports its
//! perplexity on held-out text from the synthetic language.

use cbq::eval::perplexity;
use cbq::outlier::channel_max_abs;
use cbq::toy::ToySettings;

fn main() -> cbq::Result<()> {
    let toy = ToySettings::default();
    let dir = std::env::temp_dir().join("cbq-toy");
    println!("model cache {}", toy.cache_path(&dir).display());
    let model = toy.load_or_build(&dir)?;
    let c = model.config;
    println!("{} blocks, hidden {}, {} heads, vocab {}, seq {}", c.blocks, c.hidden, c.heads, c.vocab, c.seq_len);

    let eval = toy.eval_stream(64 * c.seq_len)?;
    println!("perplexity {:.3}", perplexity(&model, &eval)?);

    // the planted outlier channel shows up in the first layer-norm output
    let sample: Vec<Vec<usize>> = vec![eval[..c.seq_len].iter().map(|&t| t as usize).collect()];
    let maxima = channel_max_abs(&model.site_activations(&sample)?[0][0]);
    let (ch, peak) = maxima.iter().enumerate().fold((0, 0.0), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
    let median = {
        let mut m = maxima.clone();
        m.sort_by(f64::total_cmp);
        m[m.len() / 2]
    };
    println!("block 0 attention input: channel {ch} peaks at {peak:.2}, median channel {median:.2}");
    Ok(())
}
