//! Writes a quantized checkpoint, reads it back, and shows that a single
//! flipped bit is caught by the trailing digest.

use cbq::eval::perplexity;
use cbq::io::{load_quantized, sample_segments, save_quantized, QuantizedCheckpoint};
use cbq::qmodel::{QuantSettings, QuantizedModel};
use cbq::toy::ToySettings;

fn main() -> cbq::Result<()> {
    let toy = ToySettings::default();
    let fp = toy.load_or_build(&std::env::temp_dir().join("cbq-toy"))?;
    let calib = sample_segments(&toy.calibration_stream(20_000)?, fp.config.seq_len, 8, 0)?;
    let dir = std::env::temp_dir().join("cbq-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| cbq::Error::File { path: dir.clone(), source: e })?;

    let eval = toy.eval_stream(16 * fp.config.seq_len)?;
    for bits in [4, 8] {
        let ckpt = QuantizedModel::prepare(&fp, &calib, &QuantSettings::rtn(bits, 8))?.export()?;
        let path = dir.join(format!("w{bits}a8.cbqq"));
        save_quantized(&path, &ckpt)?;
        let back = load_quantized(&path)?;
        assert_eq!(back, ckpt);
        println!(
            "W{bits}A8: {} bytes, perplexity {:.3} before and {:.3} after reload",
            ckpt.to_bytes().len(),
            perplexity(&ckpt, &eval)?,
            perplexity(&back, &eval)?
        );
    }

    let mut bytes = std::fs::read(dir.join("w4a8.cbqq")).map_err(|e| cbq::Error::File { path: dir.clone(), source: e })?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x04;
    match QuantizedCheckpoint::from_bytes(&bytes) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy was accepted"),
    }
    Ok(())
}
