use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokens::read_tokens;
use crate::error::{Error, Result};

/// Fixed-length token segments drawn at random offsets of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub source: String,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// `count` segments of `seq_len` tokens at uniformly random offsets.
pub fn sample_segments(tokens: &[u32], seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if seq_len == 0 || tokens.len() < seq_len {
        return Err(Error::data(format!(
            "need at least {seq_len} tokens for one segment, stream has {}",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let off = rng.random_range(0..=tokens.len() - seq_len);
            tokens[off..off + seq_len].iter().map(|&t| t as usize).collect()
        })
        .collect())
}

pub fn load_calibration(path: &Path, seq_len: usize, count: usize, seed: u64) -> Result<CalibrationSet> {
    let file = read_tokens(path)?;
    Ok(CalibrationSet {
        sequences: sample_segments(&file.tokens, seq_len, count, seed)?,
        vocab: file.vocab as usize,
        seq_len,
        seed,
        source: path.display().to_string(),
    })
}
