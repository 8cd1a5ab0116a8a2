use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{block_forward, embed_with, head_forward, BlockVars, HeadVars, Linear, ModelParams};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 200,
            batch: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Mean next-token loss of a batch plus the parameter leaves in
/// [`ModelParams::tensors`] order.
fn batch_loss<'t>(tape: &'t Tape, model: &ModelParams, batch: &[Vec<usize>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let cfg = model.config;
    let tok = tape.param(model.tok_emb.clone());
    let pos = tape.param(model.pos_emb.clone());
    let mut leaves = vec![tok, pos];
    let seq = batch[0].len();
    let mut h = embed_with(tok, pos, cfg, batch)?;
    for b in &model.blocks {
        let vars = BlockVars::from_params(tape, b, cfg.heads, true);
        leaves.extend(vars.leaves());
        h = block_forward(h, &vars, seq)?.out;
    }
    let head = HeadVars::from_params(tape, model, true);
    leaves.extend([head.ln_f.0, head.ln_f.1, head.head]);
    let logits = head_forward(h, &head)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        for t in 0..seq - 1 {
            rows.push(i * seq + t);
            targets.push(s[t + 1]);
        }
    }
    let loss = logits.gather_rows(&rows)?.cross_entropy(&targets)?;
    Ok((loss, leaves))
}

/// Next-token training with Adam on random windows of `stream`. Returns the
/// loss of every step.
pub fn train(model: &mut ModelParams, stream: &[u32], settings: &TrainSettings) -> Result<Vec<f64>> {
    let seq = model.config.seq_len;
    if stream.len() < seq {
        return Err(Error::data(format!("training stream of {} tokens is shorter than one sequence", stream.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Adam::new(settings.lr);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let batch: Vec<Vec<usize>> = (0..settings.batch)
            .map(|_| {
                let off = rng.random_range(0..=stream.len() - seq);
                stream[off..off + seq].iter().map(|&t| t as usize).collect()
            })
            .collect();
        let tape = Tape::new();
        let (loss, leaves) = batch_loss(&tape, model, &batch)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                window: "training".into(),
                iteration: losses.len(),
                loss: value,
            });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let grads: Vec<_> = leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let grad_refs: Vec<_> = grads.iter().collect();
        opt.step(&mut model.tensors_mut(), &grad_refs);
    }
    Ok(losses)
}

/// How strongly to exaggerate a few activation channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierPlanting {
    pub channels: usize,
    pub factor: f64,
    pub seed: u64,
}

impl Default for OutlierPlanting {
    fn default() -> Self {
        OutlierPlanting {
            channels: 1,
            factor: 16.0,
            seed: 7,
        }
    }
}

/// Multiplies a few layer-norm output channels by `factor` and divides the
/// matching rows of the consuming weights by the same factor. The floating
/// point function is unchanged, but the layer-norm outputs now carry the
/// channel-structured outliers seen in large language models.
pub fn plant_activation_outliers(model: &mut ModelParams, planting: &OutlierPlanting) {
    let mut rng = ChaCha8Rng::seed_from_u64(planting.seed);
    let all: Vec<usize> = (0..model.config.hidden).collect();
    let f = planting.factor;
    for block in &mut model.blocks {
        for (ln, consumers) in [
            (&mut block.ln1, &[Linear::Q, Linear::K, Linear::V][..]),
            (&mut block.ln2, &[Linear::Fc1][..]),
        ] {
            let picked: Vec<usize> = all.choose_multiple(&mut rng, planting.channels).copied().collect();
            for &c in &picked {
                ln.gain.data_mut()[c] *= f;
                ln.bias.data_mut()[c] *= f;
                for &l in consumers {
                    let w = &mut block.weights[l.index()];
                    let cols = w.cols();
                    w.data_mut()[c * cols..(c + 1) * cols].iter_mut().for_each(|x| *x /= f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn planting_preserves_the_function() {
        let cfg = ModelConfig {
            blocks: 2,
            hidden: 8,
            heads: 2,
            vocab: 11,
            seq_len: 5,
        };
        let m = ModelParams::random(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut planted = m.clone();
        plant_activation_outliers(&mut planted, &OutlierPlanting::default());
        assert_ne!(planted, m);
        let batch = vec![vec![3, 1, 4, 1, 5]];
        let (a, b) = (m.logits(&batch).unwrap(), planted.logits(&batch).unwrap());
        assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ModelConfig {
            blocks: 1,
            hidden: 8,
            heads: 2,
            vocab: 6,
            seq_len: 6,
        };
        let mut m = ModelParams::random(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let stream: Vec<u32> = (0..600).map(|i| (i % 6) as u32).collect();
        let settings = TrainSettings {
            steps: 60,
            lr: 1e-2,
            ..TrainSettings::default()
        };
        let losses = train(&mut m, &stream, &settings).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
    }
}
