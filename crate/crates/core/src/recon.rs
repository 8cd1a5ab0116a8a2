//! Cross-block reconstruction.
//!
//! Blocks are optimised in overlapping sliding windows `[l, k]`. Inside a
//! window the quantized blocks see the quantized model's own input at block
//! `l` and are pulled towards two targets: the floating-point blocks run on
//! the floating-point input (normal term) and the floating-point blocks run
//! on the quantized input (homologous term). Blocks before the window are
//! frozen and advance the quantized stream with their deployed weights.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{block_forward, BlockVars, ModelParams};
use crate::optim::Adam;
use crate::qmodel::{QBlockLeaves, QuantizedModel};
use crate::rounding::{rounding_regularizer, RegularizerSchedule};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped to this before the logarithm of the KL term.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DistanceKind {
    /// Row-wise L2 plus feature-axis KL.
    L2Kl,
    L2,
    Kl,
}

impl DistanceKind {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::L2Kl => "l2+kl",
            DistanceKind::L2 => "l2",
            DistanceKind::Kl => "kl",
        }
    }
}

/// Distance between block outputs `f1` (target) and `f2`, both
/// `[rows, features]` covering `sequences` sequences.
///
/// The L2 part is the Euclidean norm of each row's difference, averaged over
/// rows. The KL part compares `softmax(f1)` and `softmax(f2)` along the
/// feature axis, summed over positions and divided by `sequences`.
pub fn distance<'t>(f1: Var<'t>, f2: Var<'t>, kind: DistanceKind, sequences: usize) -> Result<Var<'t>> {
    let (s1, s2) = (f1.shape(), f2.shape());
    if s1 != s2 {
        return Err(Error::ShapeMismatch {
            op: "distance",
            lhs: s1,
            rhs: s2,
        });
    }
    let l2 = || -> Result<Var<'t>> { Ok(f1.sub(f2)?.row_norm().mean()) };
    let kl = || -> Result<Var<'t>> {
        let axis = s1.len() - 1;
        let p = f1.softmax(axis)?;
        let q = f2.softmax(axis)?;
        let log_ratio = p.clip(KL_FLOOR, f64::INFINITY).ln().sub(q.clip(KL_FLOOR, f64::INFINITY).ln())?;
        Ok(p.mul(log_ratio)?.sum().mul_scalar(1.0 / sequences.max(1) as f64))
    };
    match kind {
        DistanceKind::L2 => l2(),
        DistanceKind::Kl => kl(),
        DistanceKind::L2Kl => l2()?.add(kl()?),
    }
}

pub fn distance_value(f1: &Tensor, f2: &Tensor, kind: DistanceKind, sequences: usize) -> Result<f64> {
    let tape = Tape::new();
    Ok(distance(tape.constant(f1.clone()), tape.constant(f2.clone()), kind, sequences)?.item())
}

/// Inclusive block range `[l, k]`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub l: usize,
    pub k: usize,
}

impl Window {
    /// 0-based block indices.
    pub fn blocks(&self) -> std::ops::Range<usize> {
        self.l - 1..self.k
    }

    pub fn contains(&self, block: usize) -> bool {
        (self.l..=self.k).contains(&block)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.l, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowSchedule {
    pub window_size: usize,
    pub overlap: usize,
    pub windows: Vec<Window>,
}

/// Windows of `window_size` blocks advancing by `window_size - overlap`;
/// the last one is clipped at block `blocks`.
pub fn build_schedule(blocks: usize, window_size: usize, overlap: usize) -> Result<WindowSchedule> {
    if window_size == 0 || window_size > blocks {
        return Err(Error::config(format!(
            "window size {window_size} must lie in 1..={blocks}"
        )));
    }
    if overlap >= window_size {
        return Err(Error::config(format!(
            "overlap {overlap} must be smaller than the window size {window_size}"
        )));
    }
    let stride = window_size - overlap;
    let mut windows = Vec::new();
    let mut l = 1;
    loop {
        let k = (l + window_size - 1).min(blocks);
        windows.push(Window { l, k });
        if k == blocks {
            break;
        }
        l += stride;
    }
    Ok(WindowSchedule {
        window_size,
        overlap,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconSettings {
    pub window_size: usize,
    /// Blocks shared by consecutive windows.
    pub overlap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Relative to each step tensor's mean value at the start of a window.
    pub lr_step: f64,
    /// Rate for the compensation factors.
    pub lr_factors: f64,
    #[serde(skip)]
    pub regularizer: RegularizerSchedule,
    pub distance: DistanceKind,
    pub homologous: bool,
    pub seed: u64,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            window_size: 2,
            overlap: 1,
            epochs: 3,
            batch_size: 1,
            lr_step: 1e-2,
            lr_factors: 0.1,
            regularizer: RegularizerSchedule::default(),
            distance: DistanceKind::L2Kl,
            homologous: true,
            seed: 0,
        }
    }
}

impl ReconSettings {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        build_schedule(blocks, self.window_size, self.overlap)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        if !(self.lr_step >= 0.0 && self.lr_factors >= 0.0) || !self.lr_step.is_finite() || !self.lr_factors.is_finite() {
            return Err(Error::config(format!(
                "learning rates must be finite and non-negative, got {} and {}",
                self.lr_step, self.lr_factors
            )));
        }
        self.regularizer.validate()
    }
}

/// Floating-point blocks of `window` applied to `x`.
pub fn fp_window_output(fp: &ModelParams, window: Window, x: &Tensor, seq: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let mut h = tape.constant(x.clone());
    for b in window.blocks() {
        h = block_forward(h, &BlockVars::constant(&tape, &fp.blocks[b], fp.config.heads), seq)?.out;
    }
    Ok((*h.value()).clone())
}

/// How the window's quantized blocks are placed on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Soft compensation, quantization parameters as trainable leaves.
    Train,
    /// Binarized compensation, no gradients: what the exported model computes.
    Deployed,
}

pub struct WindowLoss<'t> {
    /// Reconstruction plus regulariser.
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub reg: Option<Var<'t>>,
    /// Quantization parameters of every block in the window.
    pub leaves: Vec<QBlockLeaves<'t>>,
}

/// Window loss against precomputed targets. `normal_target` is the
/// floating-point window run on the floating-point input; `homologous_target`
/// the same blocks run on `q_input`. With `homologous_target = None` only the
/// normal term is used. `reg` is `(k_reg, β)`.
#[allow(clippy::too_many_arguments)]
pub fn window_loss_with_targets<'t>(
    tape: &'t Tape,
    model: &QuantizedModel,
    window: Window,
    q_input: &Tensor,
    seq: usize,
    normal_target: &Tensor,
    homologous_target: Option<&Tensor>,
    kind: DistanceKind,
    reg: Option<(f64, f64)>,
    pass: Pass,
) -> Result<WindowLoss<'t>> {
    seq_len_of(q_input, seq)?;
    let sequences = q_input.rows() / seq;
    let mut h = tape.constant(q_input.clone());
    let mut leaves = Vec::with_capacity(window.k - window.l + 1);
    for b in window.blocks() {
        let (vars, lv) = model.blocks[b].on_tape(
            tape,
            &model.fp.blocks[b],
            model.fp.config.heads,
            pass == Pass::Train,
            pass == Pass::Deployed,
        )?;
        h = block_forward(h, &vars, seq)?.out;
        leaves.push(lv);
    }
    let normal = distance(tape.constant(normal_target.clone()), h, kind, sequences)?;
    let recon = match homologous_target {
        Some(t) => normal.add(distance(tape.constant(t.clone()), h, kind, sequences)?)?.mul_scalar(0.5),
        None => normal,
    };
    let reg = match reg {
        Some((k_reg, beta)) => {
            let terms: Vec<Var<'t>> = leaves
                .iter()
                .flat_map(|lv| lv.comps.iter().flatten())
                .map(|&a| rounding_regularizer(a, k_reg, beta))
                .collect();
            terms.into_iter().try_fold(None, |acc: Option<Var<'t>>, t| -> Result<_> {
                Ok(Some(match acc {
                    Some(a) => a.add(t)?,
                    None => t,
                }))
            })?
        }
        None => None,
    };
    let total = match reg {
        Some(r) => recon.add(r)?,
        None => recon,
    };
    Ok(WindowLoss {
        total,
        recon,
        reg,
        leaves,
    })
}

/// Inputs must hold a whole number of sequences.
fn seq_len_of(x: &Tensor, seq: usize) -> Result<usize> {
    if seq == 0 || x.rank() != 2 || !x.rows().is_multiple_of(seq) {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("window inputs must be whole sequences of {seq} rows"),
        });
    }
    Ok(seq)
}

/// Window loss from captured inputs `[sequences·seq, hidden]`: the targets
/// are computed here with the floating-point blocks. `iter` of `total_iters`
/// sets `β`.
#[allow(clippy::too_many_arguments)]
pub fn window_loss<'t>(
    tape: &'t Tape,
    model: &QuantizedModel,
    window: Window,
    fp_input: &Tensor,
    q_input: &Tensor,
    seq: usize,
    settings: &ReconSettings,
    iter: usize,
    total_iters: usize,
) -> Result<WindowLoss<'t>> {
    if fp_input.shape() != q_input.shape() {
        return Err(Error::ShapeMismatch {
            op: "window_loss",
            lhs: fp_input.shape().to_vec(),
            rhs: q_input.shape().to_vec(),
        });
    }
    seq_len_of(q_input, seq)?;
    let normal = fp_window_output(&model.fp, window, fp_input, seq)?;
    let homologous = if settings.homologous {
        Some(fp_window_output(&model.fp, window, q_input, seq)?)
    } else {
        None
    };
    let reg = (model.settings.lora_rounding && settings.regularizer.active(iter, total_iters))
        .then(|| (settings.regularizer.k_reg, settings.regularizer.beta(iter, total_iters)));
    window_loss_with_targets(tape, model, window, q_input, seq, &normal, homologous.as_ref(), settings.distance, reg, Pass::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub reg: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub window: Window,
    /// Reconstruction loss of the deployed (binarized) blocks over the whole
    /// calibration set before and after optimisation.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trajectory: Vec<IterationRecord>,
}

/// One window's update of one block's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UpdateEvent {
    pub block: usize,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub schedule: WindowSchedule,
    pub windows: Vec<WindowReport>,
    pub updates: Vec<UpdateEvent>,
}

impl PipelineReport {
    /// One line per iteration and one summary line per window.
    pub fn metrics_log(&self) -> String {
        let mut out = String::new();
        for w in &self.windows {
            for r in &w.trajectory {
                out.push_str(&format!(
                    "window={} iter={} loss={} reg={} beta={}\n",
                    w.window, r.iteration, r.loss, r.reg, r.beta
                ));
            }
            out.push_str(&format!(
                "window={} initial_loss={} final_loss={}\n",
                w.window, w.initial_loss, w.final_loss
            ));
        }
        out
    }

    /// `window,iteration,loss,reg,beta` rows for plotting.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("window,iteration,loss,reg,beta\n");
        for w in &self.windows {
            for r in &w.trajectory {
                out.push_str(&format!("{},{},{},{},{}\n", w.window, r.iteration, r.loss, r.reg, r.beta));
            }
        }
        out
    }
}

/// Per-sample tensors for one window: quantized inputs and both targets.
struct Captured {
    q_inputs: Vec<Tensor>,
    normal: Vec<Tensor>,
    homologous: Option<Vec<Tensor>>,
    seq: usize,
}

fn stack_rows(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_parts(vec![data.len() / cols, cols], data)
}

fn split_rows(t: &Tensor, seq: usize) -> Vec<Tensor> {
    let cols = t.cols();
    t.data()
        .chunks(seq * cols)
        .map(|c| Tensor::from_parts(vec![seq, cols], c.to_vec()))
        .collect()
}

fn check_calibration(model: &QuantizedModel, calib: &[Vec<usize>]) -> Result<usize> {
    let cfg = model.fp.config;
    let seq = calib.first().map(Vec::len).ok_or_else(|| Error::data("calibration set is empty"))?;
    if seq == 0 || seq > cfg.seq_len || calib.iter().any(|s| s.len() != seq) {
        return Err(Error::data(format!(
            "calibration sequences must share one length in 1..={}",
            cfg.seq_len
        )));
    }
    if calib.iter().flatten().any(|&t| t >= cfg.vocab) {
        return Err(Error::data(format!("calibration token id out of range for vocabulary {}", cfg.vocab)));
    }
    Ok(seq)
}

const CAPTURE_BATCH: usize = 8;

impl Captured {
    fn new(model: &QuantizedModel, window: Window, fp_in: Vec<Tensor>, q_in: Vec<Tensor>, homologous: bool, seq: usize) -> Result<Self> {
        let run = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(xs.len());
            for chunk in xs.chunks(CAPTURE_BATCH) {
                let refs: Vec<&Tensor> = chunk.iter().collect();
                out.extend(split_rows(&fp_window_output(&model.fp, window, &stack_rows(&refs), seq)?, seq));
            }
            Ok(out)
        };
        let normal = run(&fp_in)?;
        let homologous = if homologous { Some(run(&q_in)?) } else { None };
        Ok(Captured {
            q_inputs: q_in,
            normal,
            homologous,
            seq,
        })
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Option<Tensor>) {
        let pick = |v: &[Tensor]| stack_rows(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        (pick(&self.q_inputs), pick(&self.normal), self.homologous.as_ref().map(|h| pick(h)))
    }
}

/// Mean reconstruction loss of the deployed blocks over all samples, in
/// fixed-order batches.
fn full_pass_loss(model: &QuantizedModel, window: Window, data: &Captured, settings: &ReconSettings) -> Result<f64> {
    let n = data.q_inputs.len();
    let order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for idx in order.chunks(settings.batch_size) {
        let (q, normal, homo) = data.batch(idx);
        let tape = Tape::new();
        let loss = window_loss_with_targets(&tape, model, window, &q, data.seq, &normal, homo.as_ref(), settings.distance, None, Pass::Deployed)?;
        total += loss.recon.item() * idx.len() as f64;
    }
    Ok(total / n as f64)
}

fn window_seed(seed: u64, window: Window) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((window.l as u64) << 32 | window.k as u64)
}

fn optimize_captured(
    model: &mut QuantizedModel,
    window: Window,
    data: &Captured,
    settings: &ReconSettings,
) -> Result<WindowReport> {
    let n = data.q_inputs.len();
    let batches = n.div_ceil(settings.batch_size);
    let total_iters = settings.epochs * batches;
    let initial_loss = full_pass_loss(model, window, data, settings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(window_seed(settings.seed, window));
    let mut adam_steps = Adam::new(settings.lr_step);
    let mut adam_factors = Adam::new(settings.lr_factors);
    // Step sizes differ by orders of magnitude between sites, so their rate
    // is relative to each tensor's mean step at the start of the window.
    let step_scale: Vec<f64> = model.blocks[window.blocks()]
        .iter_mut()
        .flat_map(|b| b.parameters_mut().0.into_iter().map(|t| t.sum() / t.len() as f64))
        .collect();
    let mut trajectory = Vec::with_capacity(total_iters);
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0;
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(settings.batch_size) {
            let (q, normal, homo) = data.batch(idx);
            let beta = settings.regularizer.beta(iter, total_iters);
            let reg = (model.settings.lora_rounding && settings.regularizer.active(iter, total_iters))
                .then_some((settings.regularizer.k_reg, beta));
            let tape = Tape::new();
            let loss = window_loss_with_targets(&tape, model, window, &q, data.seq, &normal, homo.as_ref(), settings.distance, reg, Pass::Train)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    window: window.to_string(),
                    iteration: iter,
                    loss: value,
                });
            }
            trajectory.push(IterationRecord {
                iteration: iter,
                loss: loss.recon.item(),
                reg: loss.reg.map_or(0.0, |r| r.item()),
                beta,
            });
            let grads = tape.backward(loss.total)?;
            let (mut step_grads, mut factor_grads) = (Vec::new(), Vec::new());
            for lv in &loss.leaves {
                let (s, f) = lv.ordered();
                step_grads.extend(s.iter().map(|&v| grads.get_or_zeros(v)));
                factor_grads.extend(f.iter().map(|&v| grads.get_or_zeros(v)));
            }
            drop(loss);
            let (mut steps, mut factors) = (Vec::new(), Vec::new());
            for block in &mut model.blocks[window.blocks()] {
                let (s, f) = block.parameters_mut();
                steps.extend(s);
                factors.extend(f);
            }
            adam_steps.step_scaled(&mut steps, &step_grads.iter().collect::<Vec<_>>(), &step_scale);
            if !factors.is_empty() {
                adam_factors.step(&mut factors, &factor_grads.iter().collect::<Vec<_>>());
            }
            for block in &mut model.blocks[window.blocks()] {
                block.project_steps();
            }
            iter += 1;
        }
    }
    let final_loss = full_pass_loss(model, window, data, settings)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            window: window.to_string(),
            iteration: iter,
            loss: final_loss,
        });
    }
    Ok(WindowReport {
        window,
        initial_loss,
        final_loss,
        trajectory,
    })
}

/// Runs `epochs` passes of Adam over the calibration set on the
/// quantization parameters of `window`'s blocks. Inputs at block `l` are
/// captured with the current (deployed) quantized earlier blocks.
pub fn optimize_window(
    model: &mut QuantizedModel,
    window: Window,
    calib: &[Vec<usize>],
    settings: &ReconSettings,
) -> Result<WindowReport> {
    settings.validate(model.blocks.len())?;
    let seq = check_calibration(model, calib)?;
    if window.l == 0 || window.k < window.l || window.k > model.blocks.len() {
        return Err(Error::config(format!("window {window} outside 1..={}", model.blocks.len())));
    }
    let (mut fp_in, mut q_in) = (Vec::new(), Vec::new());
    for chunk in calib.chunks(CAPTURE_BATCH) {
        let (f, q) = model.capture_block_io(chunk, window.l - 1)?;
        fp_in.extend(split_rows(&f, seq));
        q_in.extend(split_rows(&q, seq));
    }
    let data = Captured::new(model, window, fp_in, q_in, settings.homologous, seq)?;
    optimize_captured(model, window, &data, settings)
}

/// Optimises every window of the schedule in order. Before each window the
/// quantized stream is advanced through the blocks that are now frozen.
pub fn run_pipeline(model: &mut QuantizedModel, calib: &[Vec<usize>], settings: &ReconSettings) -> Result<PipelineReport> {
    let blocks = model.blocks.len();
    settings.validate(blocks)?;
    let seq = check_calibration(model, calib)?;
    let schedule = build_schedule(blocks, settings.window_size, settings.overlap)?;

    let mut fp_streams: Vec<Vec<Tensor>> = vec![Vec::with_capacity(calib.len()); blocks + 1];
    for chunk in calib.chunks(CAPTURE_BATCH) {
        for (l, t) in model.fp.block_inputs(chunk)?.iter().enumerate() {
            fp_streams[l].extend(split_rows(t, seq));
        }
    }
    let mut q_stream = fp_streams[0].clone();
    let mut cursor = 0;

    let mut windows = Vec::with_capacity(schedule.windows.len());
    let mut updates = Vec::new();
    for &window in &schedule.windows {
        let start = window.l - 1;
        while cursor < start {
            for chunk in q_stream.chunks_mut(CAPTURE_BATCH) {
                let refs: Vec<&Tensor> = chunk.iter().collect();
                let out = model.block_output(cursor, &stack_rows(&refs), seq, true)?;
                for (slot, t) in chunk.iter_mut().zip(split_rows(&out, seq)) {
                    *slot = t;
                }
            }
            cursor += 1;
        }
        let data = Captured::new(
            model,
            window,
            fp_streams[start].clone(),
            q_stream.clone(),
            settings.homologous,
            seq,
        )?;
        windows.push(optimize_captured(model, window, &data, settings)?);
        updates.extend(window.blocks().map(|b| UpdateEvent { block: b + 1, window }));
    }
    Ok(PipelineReport {
        schedule,
        windows,
        updates,
    })
}
