//! Perplexity and output-agreement metrics.

use crate::error::{Error, Result};
use crate::io::QuantizedCheckpoint;
use crate::model::{ModelConfig, ModelParams};
use crate::recon::{distance_value, DistanceKind};
use crate::tensor::Tensor;

/// Anything that maps token batches to next-token logits.
pub trait LanguageModel {
    fn config(&self) -> ModelConfig;

    /// Logits `[batch·seq, vocab]` for equal-length sequences.
    fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor>;

    /// Output of the last block `[batch·seq, hidden]`.
    fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<Tensor>;
}

impl LanguageModel for ModelParams {
    fn config(&self) -> ModelConfig {
        self.config
    }

    fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        ModelParams::logits(self, batch)
    }

    fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        ModelParams::final_hidden(self, batch)
    }
}

impl LanguageModel for QuantizedCheckpoint {
    fn config(&self) -> ModelConfig {
        self.config
    }

    fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        QuantizedCheckpoint::logits(self, batch)
    }

    fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        QuantizedCheckpoint::final_hidden(self, batch)
    }
}

const EVAL_BATCH: usize = 8;

/// Splits a stream into consecutive chunks of at most `seq` tokens; chunks
/// shorter than two tokens carry no prediction and are dropped.
pub fn eval_chunks(stream: &[u32], seq: usize) -> Vec<Vec<usize>> {
    stream
        .chunks(seq)
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|&t| t as usize).collect())
        .collect()
}

/// `exp` of the mean next-token negative log-likelihood over the stream,
/// evaluated in independent chunks of the model's sequence length.
pub fn perplexity(model: &impl LanguageModel, stream: &[u32]) -> Result<f64> {
    let chunks = eval_chunks(stream, model.config().seq_len);
    perplexity_of_chunks(model, &chunks)
}

pub fn perplexity_of_chunks(model: &impl LanguageModel, chunks: &[Vec<usize>]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for group in group_by_len(chunks) {
        for batch in group.chunks(EVAL_BATCH) {
            let logits = model.logits(batch)?;
            let seq = batch[0].len();
            for (i, s) in batch.iter().enumerate() {
                for t in 0..seq - 1 {
                    total += crate::tensor::row_nll(logits.row(i * seq + t), s[t + 1]);
                    count += 1;
                }
            }
        }
    }
    Ok((total / count as f64).exp())
}

fn group_by_len(chunks: &[Vec<usize>]) -> Vec<Vec<Vec<usize>>> {
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::new();
    for c in chunks {
        match groups.iter_mut().find(|g| g[0].len() == c.len()) {
            Some(g) => g.push(c.clone()),
            None => groups.push(vec![c.clone()]),
        }
    }
    groups
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lz).collect()
}

/// Mean per-token `KL(softmax(reference) ‖ softmax(candidate))` of the
/// next-token distributions over `chunks`.
pub fn output_kl(reference: &impl LanguageModel, candidate: &impl LanguageModel, chunks: &[Vec<usize>]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for group in group_by_len(chunks) {
        for batch in group.chunks(EVAL_BATCH) {
            let p = reference.logits(batch)?;
            let q = candidate.logits(batch)?;
            for r in 0..p.len() / p.cols() {
                let lp = log_softmax(p.row(r));
                let lq = log_softmax(q.row(r));
                total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Reconstruction distance between the last-block outputs of `reference`
/// and `candidate`, averaged over `chunks` (each batch weighted by its
/// number of sequences).
pub fn reconstruction_error(
    reference: &impl LanguageModel,
    candidate: &impl LanguageModel,
    chunks: &[Vec<usize>],
    kind: DistanceKind,
) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for group in group_by_len(chunks) {
        for batch in group.chunks(EVAL_BATCH) {
            let f = reference.final_hidden(batch)?;
            let q = candidate.final_hidden(batch)?;
            total += distance_value(&f, &q, kind, batch.len())? * batch.len() as f64;
            count += batch.len();
        }
    }
    Ok(total / count as f64)
}

/// Reconstruction distance after every block between the floating-point
/// model and a quantized checkpoint, each running its own path.
pub fn block_errors(
    reference: &ModelParams,
    candidate: &QuantizedCheckpoint,
    chunks: &[Vec<usize>],
    kind: DistanceKind,
) -> Result<Vec<f64>> {
    if chunks.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut totals = vec![0.0; reference.config.blocks];
    let mut count = 0usize;
    for group in group_by_len(chunks) {
        for batch in group.chunks(EVAL_BATCH) {
            let f = reference.block_inputs(batch)?;
            let q = candidate.block_outputs(batch)?;
            for (b, (fb, qb)) in f[1..].iter().zip(&q).enumerate() {
                totals[b] += distance_value(fb, qb, kind, batch.len())? * batch.len() as f64;
            }
            count += batch.len();
        }
    }
    Ok(totals.into_iter().map(|t| t / count as f64).collect())
}
