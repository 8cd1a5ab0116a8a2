//! Uniform symmetric fake quantization with learnable step sizes.
//!
//! Values are mapped to the signed lattice `[-2^(b-1), 2^(b-1) - 1]`,
//! rounded, and scaled back. Rounding is straight-through, so the step size
//! receives the learned-step-size gradient: `round(x/Δ) - x/Δ` inside the
//! clamp range and the clamp bound outside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smallest admissible step size.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// One step per index along the given axis.
    PerChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    Nearest,
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
    pub rounding: Rounding,
    pub target: Target,
}

impl QuantSpec {
    /// Per-tensor weight quantizer; weights round down and rely on the
    /// rounding compensation to pick the upper lattice point.
    pub fn weight(bits: u32) -> Result<Self> {
        QuantSpec {
            bits,
            granularity: Granularity::PerTensor,
            rounding: Rounding::Floor,
            target: Target::Weight,
        }
        .validated()
    }

    /// Per-tensor activation quantizer with nearest rounding.
    pub fn activation(bits: u32) -> Result<Self> {
        QuantSpec {
            bits,
            granularity: Granularity::PerTensor,
            rounding: Rounding::Nearest,
            target: Target::Activation,
        }
        .validated()
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    fn validated(self) -> Result<Self> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::config(format!("bit width {} outside [2, 16]", self.bits)));
        }
        Ok(self)
    }

    pub fn qmin(&self) -> f64 {
        -((1i64 << (self.bits - 1)) as f64)
    }

    pub fn qmax(&self) -> f64 {
        ((1i64 << (self.bits - 1)) - 1) as f64
    }

    /// Shape of the step tensor for values of `shape`. Per-channel steps
    /// along axis `a` get shape `[dims[a], 1, ..., 1]` so that they broadcast
    /// against the values under trailing alignment.
    pub fn step_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        match self.granularity {
            Granularity::PerTensor => Ok(vec![1]),
            Granularity::PerChannel(axis) => {
                if axis >= shape.len() {
                    return Err(Error::InvalidShape {
                        shape: shape.to_vec(),
                        reason: format!("per-channel axis {axis} out of range"),
                    });
                }
                let mut s = vec![shape[axis]];
                s.extend(std::iter::repeat_n(1, shape.len() - axis - 1));
                Ok(s)
            }
        }
    }
}

/// Learnable step sizes for one quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub step: Tensor,
}

impl QuantState {
    pub fn new(step: Tensor) -> Result<Self> {
        if let Some(&bad) = step.data().iter().find(|&&s| s.is_nan() || s <= 0.0) {
            return Err(Error::NonPositiveStep(bad));
        }
        Ok(QuantState { step })
    }

    /// Clamp every step to at least [`MIN_STEP`].
    pub fn project(&mut self) {
        self.step.data_mut().iter_mut().for_each(|s| {
            if s.is_nan() || *s < MIN_STEP {
                *s = MIN_STEP;
            }
        });
    }
}

/// Max-abs initialisation: `max|v| / qmax` per group, floored at [`MIN_STEP`].
pub fn init_step(values: &Tensor, spec: &QuantSpec) -> Result<QuantState> {
    let step_shape = spec.step_shape(values.shape())?;
    let qmax = spec.qmax();
    let steps = match spec.granularity {
        Granularity::PerTensor => vec![values.max_abs()],
        Granularity::PerChannel(axis) => {
            let shape = values.shape();
            let channels = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut maxes = vec![0.0_f64; channels];
            for (i, v) in values.data().iter().enumerate() {
                let c = (i / inner) % channels;
                maxes[c] = maxes[c].max(v.abs());
            }
            maxes
        }
    };
    let steps = steps.into_iter().map(|m| (m / qmax).max(MIN_STEP)).collect();
    QuantState::new(Tensor::new(step_shape, steps)?)
}

fn check_step(step: &Tensor) -> Result<()> {
    match step.data().iter().find(|&&s| s.is_nan() || s <= 0.0) {
        Some(&bad) => Err(Error::NonPositiveStep(bad)),
        None => Ok(()),
    }
}

/// Lattice value `round_mode(clamp(x/Δ))`, with the clamped quotient as its
/// straight-through carrier.
fn lattice<'t>(x: Var<'t>, step: Var<'t>, spec: &QuantSpec) -> Result<Var<'t>> {
    check_step(&step.value())?;
    let v = x.div(step)?;
    let c = v.clip(spec.qmin(), spec.qmax());
    let r = match spec.rounding {
        Rounding::Nearest => c.round(),
        Rounding::Floor => c.floor(),
    };
    x.tape().straight_through(r, c)
}

/// `Δ · clamp(round_mode(x/Δ), qmin, qmax)` on the tape.
pub fn fake_quant<'t>(x: Var<'t>, step: Var<'t>, spec: &QuantSpec) -> Result<Var<'t>> {
    lattice(x, step, spec)?.mul(step)
}

/// Tape-free [`fake_quant`] with identical arithmetic.
pub fn fake_quant_tensor(x: &Tensor, state: &QuantState, spec: &QuantSpec) -> Result<Tensor> {
    let tape = Tape::new();
    let out = fake_quant(tape.constant(x.clone()), tape.constant(state.step.clone()), spec)?;
    Ok((*out.value()).clone())
}

/// Integer lattice values with their shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codes {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
}

impl Codes {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.values.iter().map(|&c| c as f64).collect())
    }
}

/// Clamped integer codes with `Δ · codes == fake_quant(x)` exactly.
pub fn integer_codes(x: &Tensor, state: &QuantState, spec: &QuantSpec) -> Result<Codes> {
    let tape = Tape::new();
    let r = lattice(tape.constant(x.clone()), tape.constant(state.step.clone()), spec)?;
    Ok(Codes {
        shape: x.shape().to_vec(),
        values: r.value().data().iter().map(|&c| c as i32).collect(),
    })
}

/// `Δ · codes`, broadcasting the step exactly as [`fake_quant`] does.
pub fn dequantize(codes: &Codes, state: &QuantState) -> Result<Tensor> {
    codes.to_tensor().mul(&state.step)
}
