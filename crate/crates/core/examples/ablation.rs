//! A small ablation at W8A8: the default recipe against single-block windows
//! and against no outlier pre-processing, over three seeds.

use cbq::ablation::{Experiment, Variant};
use cbq::eval::eval_chunks;
use cbq::qmodel::QuantSettings;
use cbq::recon::ReconSettings;
use cbq::toy::ToySettings;

fn main() -> cbq::Result<()> {
    let toy = ToySettings::default();
    let fp = toy.load_or_build(&std::env::temp_dir().join("cbq-toy"))?;
    let seq = fp.config.seq_len;
    let exp = Experiment {
        fp,
        calib_stream: toy.calibration_stream(50_000)?,
        calib_count: 32,
        eval_chunks: eval_chunks(&toy.eval_stream(32 * seq)?, seq),
    };

    let q = QuantSettings::cbq(8, 8);
    let r = ReconSettings::default();
    let variants = [
        Variant::new("default", q, Some(r)),
        Variant::new("window-1", q, Some(ReconSettings { window_size: 1, overlap: 0, ..r })),
        Variant::new("no-cfp", QuantSettings { cfp: false, ..q }, Some(r)),
        Variant::new("rtn", QuantSettings::rtn(8, 8), None),
    ];
    println!("{:<10} {:>12} {:>10} {:>10}", "variant", "recon_error", "output_kl", "ppl");
    for v in &variants {
        let row = exp.row(v, &[0, 1, 2])?;
        println!(
            "{:<10} {:>12.4} {:>10.5} {:>10.3}",
            row.name, row.median_recon_error, row.median_output_kl, row.median_perplexity
        );
    }
    Ok(())
}
