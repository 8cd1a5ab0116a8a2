//! Floating-point model checkpoints.

use super::{read_file, write_file};
use std::path::Path;

use super::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::ModelParams;

const MAGIC: &[u8; 4] = b"CBQF";
const VERSION: u32 = 1;

pub fn model_to_bytes(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.config(&model.config);
    for t in model.tensors() {
        w.tensor(t);
    }
    w.finish()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::open(bytes, MAGIC, "floating-point checkpoint", VERSION)?;
    let config = r.config()?;
    let mut model = ModelParams::zeros(config);
    for slot in model.tensors_mut() {
        let t = r.tensor()?;
        if t.shape() != slot.shape() {
            return Err(Error::data(format!(
                "checkpoint tensor has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    r.finished()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    write_file(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            blocks: 1,
            hidden: 4,
            heads: 1,
            vocab: 7,
            seq_len: 3,
        };
        ModelParams::random(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = model_to_bytes(&model());
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checksum) | Err(Error::Data(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(model_from_bytes(&flipped), Err(Error::Checksum)));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(model_from_bytes(&magic).is_err());
    }
}
