//! Token files, calibration sampling and checkpoint formats.
//!
//! All binary formats are little-endian. Checkpoints end with a SHA-256
//! digest of every preceding byte.

pub mod calibration;
pub mod checkpoint;
pub mod quantized;
pub mod tokens;

mod bytes;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use calibration::{load_calibration, sample_segments, CalibrationSet};
pub use checkpoint::{load_model, save_model};
pub use quantized::{load_quantized, save_quantized, QuantizedCheckpoint};
pub use tokens::{read_tokens, write_tokens, TokenFile};

/// `fs::read` with the path attached to any failure.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
