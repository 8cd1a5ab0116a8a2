//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use cbq::model::{ModelConfig, ModelParams};
use cbq::qmodel::{QuantSettings, QuantizedModel};
use cbq::recon::{window_loss, ReconSettings, Window};
use cbq::toy::ToySettings;
use cbq::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(blocks: usize) -> ModelConfig {
    ModelConfig {
        blocks,
        hidden: 16,
        heads: 2,
        vocab: 24,
        seq_len: 6,
    }
}

pub fn tiny_model(blocks: usize, seed: u64) -> ModelParams {
    ModelParams::random(tiny_config(blocks), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab)).collect())
        .collect()
}

/// The trained toy model, built once per test binary and cached on disk
/// across binaries.
pub fn toy_model() -> &'static ModelParams {
    static MODEL: OnceLock<ModelParams> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("toy-cache");
        ToySettings::default().load_or_build(&dir).unwrap()
    })
}

/// A central difference disagreeing with both one-sided differences marks a
/// kink (a clip boundary) inside the probe interval.
pub struct Probe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub smooth: bool,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-9 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Where a scalar parameter lives inside a quantized model.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Step { block: usize, index: usize, entry: usize },
    Factor { block: usize, index: usize, entry: usize },
}

fn slot_mut(model: &mut QuantizedModel, slot: Slot) -> &mut f64 {
    let (block, index, entry, factor) = match slot {
        Slot::Step { block, index, entry } => (block, index, entry, false),
        Slot::Factor { block, index, entry } => (block, index, entry, true),
    };
    let (steps, factors) = model.blocks[block].parameters_mut();
    let t = if factor { factors } else { steps }.into_iter().nth(index).unwrap();
    &mut t.data_mut()[entry]
}

/// A random small quantized instance and the window whose loss is checked.
pub struct GradientInstance {
    pub model: QuantizedModel,
    pub window: Window,
    pub fp_input: Tensor,
    pub q_input: Tensor,
    pub seq: usize,
    pub settings: ReconSettings,
}

impl GradientInstance {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = tiny_model(3, seed);
        let cfg = fp.config;
        let batch = random_batch(&cfg, 2, seed ^ 0x5eed);
        let bits = [(4, 4), (4, 8), (3, 6)][rng.random_range(0..3)];
        let mut model = QuantizedModel::prepare(&fp, &batch, &QuantSettings { seed, ..QuantSettings::cbq(bits.0, bits.1) })
            .unwrap();
        // Move the factors off their warm start so compensation entries are
        // spread over the open interval.
        for block in &mut model.blocks {
            for f in block.parameters_mut().1 {
                f.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let l = rng.random_range(1..=2);
        let window = Window { l, k: l + 1 };
        let (fp_input, q_input) = model.capture_block_io(&batch, l - 1).unwrap();
        GradientInstance {
            model,
            window,
            fp_input,
            q_input,
            seq: cfg.seq_len,
            settings: ReconSettings::default(),
        }
    }

    /// Loss with the rounding decisions either recorded or replayed.
    fn loss(&self, model: &QuantizedModel, replay: Option<&[Tensor]>) -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        match replay {
            Some(r) => tape.replay_straight_through(r.to_vec()),
            None => tape.record_straight_through(),
        }
        let wl = window_loss(&tape, model, self.window, &self.fp_input, &self.q_input, self.seq, &self.settings, 5, 10)
            .unwrap();
        (wl.total.item(), tape.take_straight_through_record())
    }

    /// Analytic gradients against central differences for every step size in
    /// the window and `factor_probes` random compensation-factor entries.
    pub fn probes(&self, factor_probes: usize, seed: u64) -> Vec<Probe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        tape.record_straight_through();
        let wl = window_loss(&tape, &self.model, self.window, &self.fp_input, &self.q_input, self.seq, &self.settings, 5, 10)
            .unwrap();
        let residuals = tape.take_straight_through_record();
        let grads = tape.backward(wl.total).unwrap();

        let mut slots = Vec::new();
        for (lv, block) in wl.leaves.iter().zip(self.window.blocks()) {
            let (steps, factors) = lv.ordered();
            for (index, s) in steps.iter().enumerate() {
                for entry in 0..s.value().len() {
                    slots.push((Slot::Step { block, index, entry }, grads.get_or_zeros(*s).data()[entry]));
                }
            }
            for _ in 0..factor_probes {
                if factors.is_empty() {
                    break;
                }
                let index = rng.random_range(0..factors.len());
                let entry = rng.random_range(0..factors[index].value().len());
                slots.push((Slot::Factor { block, index, entry }, grads.get_or_zeros(factors[index]).data()[entry]));
            }
        }

        let mut out = Vec::with_capacity(slots.len());
        let mut model = self.model.clone();
        for (slot, analytic) in slots {
            let x0 = *slot_mut(&mut model, slot);
            let h = 1e-6 * x0.abs().max(1e-2);
            let mut at = |x: f64| {
                *slot_mut(&mut model, slot) = x;
                self.loss(&model, Some(&residuals)).0
            };
            let (fp, f0, fm) = (at(x0 + h), at(x0), at(x0 - h));
            *slot_mut(&mut model, slot) = x0;
            let central = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let smooth = (fwd - bwd).abs() <= 1e-3 * central.abs().max(1e-6);
            out.push(Probe {
                name: format!("{slot:?}"),
                analytic,
                numeric: central,
                smooth,
            });
        }
        out
    }
}
