//! Quantizes the toy model to 4-bit weights and 8-bit activations with
//! sliding-window reconstruction, and compares against round-to-nearest.

use cbq::eval::{eval_chunks, perplexity_of_chunks};
use cbq::io::sample_segments;
use cbq::qmodel::{QuantSettings, QuantizedModel};
use cbq::recon::{run_pipeline, ReconSettings};
use cbq::toy::ToySettings;

fn main() -> cbq::Result<()> {
    let toy = ToySettings::default();
    let fp = toy.load_or_build(&std::env::temp_dir().join("cbq-toy"))?;
    let seq = fp.config.seq_len;
    let calib = sample_segments(&toy.calibration_stream(50_000)?, seq, 32, 0)?;
    let chunks = eval_chunks(&toy.eval_stream(64 * seq)?, seq);

    let rtn = QuantizedModel::prepare(&fp, &calib, &QuantSettings::rtn(4, 8))?.export()?;

    let mut qm = QuantizedModel::prepare(&fp, &calib, &QuantSettings::cbq(4, 8))?;
    let settings = ReconSettings::default();
    let report = run_pipeline(&mut qm, &calib, &settings)?;
    for w in &report.windows {
        println!("window {}: loss {:.4} -> {:.4}", w.window, w.initial_loss, w.final_loss);
    }
    let cbq = qm.export()?;

    println!("perplexity fp  {:.3}", perplexity_of_chunks(&fp, &chunks)?);
    println!("perplexity rtn {:.3}", perplexity_of_chunks(&rtn, &chunks)?);
    println!("perplexity cbq {:.3}", perplexity_of_chunks(&cbq, &chunks)?);
    Ok(())
}
