//! Quantization state attached to a floating-point model.
//!
//! [`QuantizedModel::prepare`] runs the outlier pre-processing on a
//! floating-point model, initialises every step size and, optionally, a
//! rounding compensation per linear. The result is what the reconstruction
//! engine optimises and what [`QuantizedModel::export`] turns into a
//! deployable checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::quantized::{QuantizedCheckpoint, StoredBlock, StoredLinear, StoredSite};
use crate::model::{BlockParams, BlockVars, ActQuant, Linear, ModelParams, Site};
use crate::outlier::{
    channel_max_abs, detect_weight, fold_scales, scales_from_maxima, truncate_weights, ChannelScales, OutlierConfig,
    OutlierReport,
};
use crate::quant::{fake_quant, init_step, Granularity, QuantSpec, QuantState, Rounding};
use crate::rounding::{compensated_codes, compensated_quant, compensation_matrix, default_rank, RoundingCompensation};
use crate::tensor::{Tape, Tensor, Var};

/// How a floating-point model is turned into a quantized one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantSettings {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Compensation rank; `None` picks a per-layer default.
    pub rank: Option<usize>,
    /// Coarse-to-fine outlier pre-processing.
    pub cfp: bool,
    /// Low-rank rounding compensation on top of floor rounding.
    pub lora_rounding: bool,
    /// Round weights to nearest instead of down (the plain baseline).
    pub nearest_weights: bool,
    pub outlier: OutlierConfig,
    pub seed: u64,
}

impl QuantSettings {
    /// Full method: outlier pre-processing plus rounding compensation.
    pub fn cbq(weight_bits: u32, act_bits: u32) -> Self {
        QuantSettings {
            weight_bits,
            act_bits,
            rank: None,
            cfp: true,
            lora_rounding: true,
            nearest_weights: false,
            outlier: OutlierConfig::default(),
            seed: 0,
        }
    }

    /// Round-to-nearest with max-abs steps and no pre-processing.
    pub fn rtn(weight_bits: u32, act_bits: u32) -> Self {
        QuantSettings {
            cfp: false,
            lora_rounding: false,
            nearest_weights: true,
            ..QuantSettings::cbq(weight_bits, act_bits)
        }
    }

    pub fn validate(&self) -> Result<()> {
        QuantSpec::weight(self.weight_bits)?;
        QuantSpec::activation(self.act_bits)?;
        self.outlier.validate()?;
        if self.lora_rounding && self.nearest_weights {
            return Err(Error::config("rounding compensation requires floor-rounded weights"));
        }
        Ok(())
    }

    pub fn weight_spec(&self) -> Result<QuantSpec> {
        let spec = QuantSpec::weight(self.weight_bits)?;
        Ok(if self.nearest_weights { spec.with_rounding(Rounding::Nearest) } else { spec })
    }

    /// Activations switch to per-channel steps below 4 bits.
    pub fn act_spec(&self) -> Result<QuantSpec> {
        let spec = QuantSpec::activation(self.act_bits)?;
        Ok(if self.act_bits < 4 { spec.with_granularity(Granularity::PerChannel(1)) } else { spec })
    }
}

/// Record of a weight truncation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truncation {
    pub threshold: f64,
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    /// Pre-processed floating-point weight `[in, out]` that gets quantized.
    pub weight: Tensor,
    pub spec: QuantSpec,
    pub state: QuantState,
    pub comp: Option<RoundingCompensation>,
    pub truncation: Option<Truncation>,
    pub report: Option<OutlierReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSite {
    pub spec: QuantSpec,
    pub state: QuantState,
    pub scales: ChannelScales,
    pub report: Option<OutlierReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub linears: [QLinear; 6],
    pub sites: [QSite; 4],
}

/// Tape handles of one block's quantization parameters.
pub struct QBlockLeaves<'t> {
    pub w_steps: [Var<'t>; 6],
    pub a_steps: [Var<'t>; 4],
    pub factors: [Option<(Var<'t>, Var<'t>)>; 6],
    /// Soft compensation matrices, for the regulariser.
    pub comps: [Option<Var<'t>>; 6],
}

impl QBlock {
    /// Places the block on `tape`. Quantization parameters become trainable
    /// leaves when `trainable`; `hard` replaces the soft compensation by its
    /// binarized form (deployment behaviour).
    pub fn on_tape<'t>(
        &self,
        tape: &'t Tape,
        fp: &BlockParams,
        heads: usize,
        trainable: bool,
        hard: bool,
    ) -> Result<(BlockVars<'t>, QBlockLeaves<'t>)> {
        let mut vars = BlockVars::constant(tape, fp, heads);
        let a_steps: [Var<'t>; 4] = std::array::from_fn(|i| tape.leaf(self.sites[i].state.step.clone(), trainable));
        let w_steps: [Var<'t>; 6] = std::array::from_fn(|i| tape.leaf(self.linears[i].state.step.clone(), trainable));
        let mut factors: [Option<(Var<'t>, Var<'t>)>; 6] = Default::default();
        let mut comps: [Option<Var<'t>>; 6] = Default::default();
        for (i, lin) in self.linears.iter().enumerate() {
            let w = tape.constant(lin.weight.clone());
            vars.weights[i] = match &lin.comp {
                Some(c) if hard => compensated_quant(w, w_steps[i], tape.constant(c.binarized()?), &lin.spec)?,
                Some(c) => {
                    let v1 = tape.leaf(c.v1.clone(), trainable);
                    let v2 = tape.leaf(c.v2.clone(), trainable);
                    let a = compensation_matrix(v1, v2)?;
                    factors[i] = Some((v1, v2));
                    comps[i] = Some(a);
                    compensated_quant(w, w_steps[i], a, &lin.spec)?
                }
                None => fake_quant(w, w_steps[i], &lin.spec)?,
            };
        }
        vars.act = Some(std::array::from_fn(|i| {
            let site = &self.sites[i];
            ActQuant {
                scales: (!site.scales.is_identity()).then(|| tape.constant(site.scales.as_tensor())),
                step: a_steps[i],
                spec: site.spec,
            }
        }));
        Ok((
            vars,
            QBlockLeaves {
                w_steps,
                a_steps,
                factors,
                comps,
            },
        ))
    }

    /// Integer codes per linear, with compensation binarized and folded in.
    pub fn codes(&self) -> Result<Vec<crate::quant::Codes>> {
        self.linears
            .iter()
            .map(|lin| match &lin.comp {
                Some(c) => compensated_codes(&lin.weight, &lin.state, &c.binarized()?, &lin.spec),
                None => crate::quant::integer_codes(&lin.weight, &lin.state, &lin.spec),
            })
            .collect()
    }

    /// Every quantization parameter tensor, in a fixed order.
    pub fn parameters_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let mut steps: Vec<&mut Tensor> = Vec::new();
        let mut factors: Vec<&mut Tensor> = Vec::new();
        for lin in &mut self.linears {
            steps.push(&mut lin.state.step);
            if let Some(c) = &mut lin.comp {
                factors.push(&mut c.v1);
                factors.push(&mut c.v2);
            }
        }
        for site in &mut self.sites {
            steps.push(&mut site.state.step);
        }
        (steps, factors)
    }

    pub fn project_steps(&mut self) {
        self.linears.iter_mut().for_each(|l| l.state.project());
        self.sites.iter_mut().for_each(|s| s.state.project());
    }
}

impl<'t> QBlockLeaves<'t> {
    /// Leaves in the order of [`QBlock::parameters_mut`]: steps first, then
    /// compensation factors.
    pub fn ordered(&self) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        let mut steps = self.w_steps.to_vec();
        steps.extend(self.a_steps);
        let factors = self.factors.iter().flatten().flat_map(|&(a, b)| [a, b]).collect();
        (steps, factors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// The floating-point reference; its layer norms, embeddings, biases and
    /// head are shared with the quantized model.
    pub fp: ModelParams,
    pub settings: QuantSettings,
    pub blocks: Vec<QBlock>,
}

/// Per-channel activation maxima at every site of every block.
fn site_maxima(fp: &ModelParams, calib: &[Vec<usize>]) -> Result<Vec<[Vec<f64>; 4]>> {
    let cfg = fp.config;
    let mut maxima: Vec<[Vec<f64>; 4]> =
        (0..cfg.blocks).map(|_| Site::ALL.map(|s| vec![0.0; s.channels(&cfg)])).collect();
    for chunk in calib.chunks(8) {
        for (b, sites) in fp.site_activations(chunk)?.iter().enumerate() {
            for (i, x) in sites.iter().enumerate() {
                for (m, v) in maxima[b][i].iter_mut().zip(channel_max_abs(x)) {
                    *m = m.max(v);
                }
            }
        }
    }
    Ok(maxima)
}

impl QuantizedModel {
    /// Outlier pre-processing, step initialisation and compensation set-up
    /// using calibration sequences `calib`.
    pub fn prepare(fp: &ModelParams, calib: &[Vec<usize>], settings: &QuantSettings) -> Result<Self> {
        settings.validate()?;
        if calib.is_empty() {
            return Err(Error::data("calibration set is empty"));
        }
        let cfg = fp.config;
        let wspec = settings.weight_spec()?;
        let aspec = settings.act_spec()?;
        let maxima = site_maxima(fp, calib)?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (bp, block_max) in fp.blocks.iter().zip(&maxima) {
            let mut weights: Vec<Tensor> = bp.weights.to_vec();
            let mut truncations: Vec<Option<Truncation>> = vec![None; 6];
            let mut wreports: Vec<Option<OutlierReport>> = vec![None; 6];
            let mut sites = Vec::with_capacity(4);
            if settings.cfp {
                for l in Linear::ALL {
                    let w = &weights[l.index()];
                    let report = detect_weight(w, &settings.outlier)?;
                    let clipped = w.data().iter().filter(|x| x.abs() > report.reserved_max).count();
                    if report.has_outliers() {
                        truncations[l.index()] = Some(Truncation {
                            threshold: report.reserved_max,
                            clipped,
                        });
                    }
                    weights[l.index()] = truncate_weights(w, &report);
                    wreports[l.index()] = Some(report);
                }
            }
            for site in Site::ALL {
                let chan_max = &block_max[site.index()];
                let (scales, report) = if settings.cfp {
                    let (s, r) = scales_from_maxima(chan_max, &settings.outlier)?;
                    (s, Some(r))
                } else {
                    (ChannelScales::identity(chan_max.len()), None)
                };
                for &l in site.consumers() {
                    if !scales.is_identity() {
                        weights[l.index()] = fold_scales(&weights[l.index()], &scales)?;
                    }
                }
                let scaled: Vec<f64> = chan_max.iter().zip(&scales.s).map(|(m, s)| m / s).collect();
                let state = init_step(&Tensor::matrix(1, scaled.len(), scaled)?, &aspec)?;
                sites.push(QSite {
                    spec: aspec,
                    state,
                    scales,
                    report,
                });
            }
            let mut linears = Vec::with_capacity(6);
            for l in Linear::ALL {
                let w = weights[l.index()].clone();
                let state = init_step(&w, &wspec)?;
                let comp = if settings.lora_rounding {
                    let (d, k) = (w.shape()[0], w.shape()[1]);
                    let rank = settings.rank.unwrap_or_else(|| default_rank(d, k));
                    Some(RoundingCompensation::warm_start(&w, &state, rank, &mut rng)?)
                } else {
                    None
                };
                linears.push(QLinear {
                    weight: w,
                    spec: wspec,
                    state,
                    comp,
                    truncation: truncations[l.index()].take(),
                    report: wreports[l.index()].take(),
                });
            }
            blocks.push(QBlock {
                linears: linears.try_into().expect("six linears"),
                sites: sites.try_into().expect("four sites"),
            });
        }
        Ok(QuantizedModel {
            fp: fp.clone(),
            settings: *settings,
            blocks,
        })
    }

    /// Output of quantized block `b` for `x`, without gradients.
    pub fn block_output(&self, b: usize, x: &Tensor, seq: usize, hard: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let (vars, _) = self.blocks[b].on_tape(&tape, &self.fp.blocks[b], self.fp.config.heads, false, hard)?;
        let out = crate::model::block_forward(tape.constant(x.clone()), &vars, seq)?.out;
        Ok((*out.value()).clone())
    }

    /// Inputs to block `l` (0-based) under the floating-point model and under
    /// the quantized model (deployed, i.e. with binarized compensation).
    /// Both are `[batch·seq, hidden]`; for `l = 0` they coincide.
    pub fn capture_block_io(&self, batch: &[Vec<usize>], l: usize) -> Result<(Tensor, Tensor)> {
        if l >= self.blocks.len() {
            return Err(Error::config(format!("block index {l} out of range for {} blocks", self.blocks.len())));
        }
        let seq = batch[0].len();
        let fp_inputs = self.fp.block_inputs(batch)?;
        let mut q = fp_inputs[0].clone();
        for b in 0..l {
            q = self.block_output(b, &q, seq, true)?;
        }
        Ok((fp_inputs[l].clone(), q))
    }

    /// Binarizes every compensation, folds it into integer codes and packages
    /// the deployable checkpoint.
    pub fn export(&self) -> Result<QuantizedCheckpoint> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (qb, fb) in self.blocks.iter().zip(&self.fp.blocks) {
            let codes = qb.codes()?;
            let linears = qb
                .linears
                .iter()
                .zip(codes)
                .zip(&fb.biases)
                .map(|((lin, codes), bias)| StoredLinear {
                    spec: lin.spec,
                    step: lin.state.step.clone(),
                    codes,
                    bias: bias.clone(),
                    truncation: lin.truncation.clone(),
                })
                .collect::<Vec<_>>();
            let sites = qb
                .sites
                .iter()
                .map(|s| StoredSite {
                    spec: s.spec,
                    step: s.state.step.clone(),
                    scales: s.scales.clone(),
                })
                .collect::<Vec<_>>();
            blocks.push(StoredBlock {
                ln1: fb.ln1.clone(),
                ln2: fb.ln2.clone(),
                linears: linears.try_into().expect("six linears"),
                sites: sites.try_into().expect("four sites"),
            });
        }
        Ok(QuantizedCheckpoint {
            config: self.fp.config,
            tok_emb: self.fp.tok_emb.clone(),
            pos_emb: self.fp.pos_emb.clone(),
            blocks,
            ln_f: self.fp.ln_f.clone(),
            head: self.fp.head.clone(),
        })
    }

    /// Total learnable compensation values.
    pub fn compensation_parameters(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears.iter())
            .filter_map(|l| l.comp.as_ref())
            .map(|c| c.parameter_count())
            .sum()
    }

    /// All soft compensation entries.
    pub fn compensation_entries(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for lin in self.blocks.iter().flat_map(|b| b.linears.iter()) {
            if let Some(c) = &lin.comp {
                out.extend_from_slice(c.matrix()?.data());
            }
        }
        Ok(out)
    }
}
