//! Low-rank learnable rounding compensation.
//!
//! Weights are rounded down onto the lattice and a near-binary matrix
//! `A = clip(sigmoid(V1·V2)·(ζ - γ) + γ, 0, 1)` decides, per element,
//! whether to move up one lattice step. `A` is parameterised by two thin
//! factors so only `r·(d + k)` values are learned per `d×k` weight.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::{Codes, QuantSpec, QuantState, Rounding};
use crate::tensor::{Tape, Tensor, Var};

/// Upper stretch of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
/// Lower stretch of the rectified sigmoid.
pub const GAMMA: f64 = -0.1;

/// Largest admissible rank for a `d×k` weight.
pub fn max_rank(d: usize, k: usize) -> usize {
    d.min(k) / 4
}

/// Default rank: an eighth of the smaller dimension.
pub fn default_rank(d: usize, k: usize) -> usize {
    (d.min(k) / 8).max(1)
}

/// Learnable values for a rank-`r` factorisation of a `d×k` matrix.
pub fn parameter_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundingCompensation {
    /// `[d, r]`
    pub v1: Tensor,
    /// `[r, k]`
    pub v2: Tensor,
}

fn check_rank(d: usize, k: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > max_rank(d, k) {
        return Err(Error::config(format!(
            "compensation rank {rank} must lie in [1, {}] for a {d}x{k} weight",
            max_rank(d, k)
        )));
    }
    Ok(())
}

impl RoundingCompensation {
    pub fn from_factors(v1: Tensor, v2: Tensor) -> Result<Self> {
        if v1.rank() != 2 || v2.rank() != 2 || v1.shape()[1] != v2.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "rounding_compensation",
                lhs: v1.shape().to_vec(),
                rhs: v2.shape().to_vec(),
            });
        }
        check_rank(v1.shape()[0], v2.shape()[1], v1.shape()[1])?;
        Ok(RoundingCompensation { v1, v2 })
    }

    /// `V1 = 0` and a small random `V2`, so `A = 0.5` everywhere while both
    /// factors still receive gradient.
    pub fn neutral(d: usize, k: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(d, k, rank)?;
        let v2 = (0..rank * k).map(|_| rng.random_range(-0.01..0.01)).collect();
        Ok(RoundingCompensation {
            v1: Tensor::zeros([d, rank]),
            v2: Tensor::new([rank, k], v2)?,
        })
    }

    /// Starts `A` close to the fractional part of `W/Δ`: the logit of the
    /// matching sigmoid value is approximated by its best rank-`r` factorisation
    /// (truncated SVD), split evenly between the two factors. Falls back to
    /// [`RoundingCompensation::neutral`] if the factorisation is not finite.
    pub fn warm_start(weight: &Tensor, state: &QuantState, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "compensation expects a matrix weight".into(),
            });
        }
        let (d, k) = (weight.shape()[0], weight.shape()[1]);
        check_rank(d, k, rank)?;
        let v = weight.div(&state.step)?;
        let logits: Vec<f64> = v
            .data()
            .iter()
            .map(|&x| {
                let p = ((x - x.floor()) - GAMMA) / (ZETA - GAMMA);
                (p / (1.0 - p)).ln()
            })
            .collect();
        let z = DMatrix::from_row_slice(d, k, &logits);
        let svd = z.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            return RoundingCompensation::neutral(d, k, rank, rng);
        };
        let mut v1 = vec![0.0; d * rank];
        let mut v2 = vec![0.0; rank * k];
        for j in 0..rank {
            let s = svd.singular_values[j].sqrt();
            for i in 0..d {
                v1[i * rank + j] = u[(i, j)] * s;
            }
            for c in 0..k {
                v2[j * k + c] = vt[(j, c)] * s;
            }
        }
        if v1.iter().chain(&v2).any(|x| !x.is_finite()) {
            return RoundingCompensation::neutral(d, k, rank, rng);
        }
        Ok(RoundingCompensation {
            v1: Tensor::new([d, rank], v1)?,
            v2: Tensor::new([rank, k], v2)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.v1.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.v2.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.v1.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self.rows(), self.cols(), self.rank())
    }

    /// Current (soft) compensation matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let a = compensation_matrix(tape.constant(self.v1.clone()), tape.constant(self.v2.clone()))?;
        Ok((*a.value()).clone())
    }

    /// Compensation snapped to `{0, 1}` (entries ≥ 0.5 become 1).
    pub fn binarized(&self) -> Result<Tensor> {
        Ok(self.matrix()?.map(|a| if a >= 0.5 { 1.0 } else { 0.0 }))
    }
}

/// `clip(sigmoid(V1·V2)·(ζ - γ) + γ, 0, 1)` on the tape.
pub fn compensation_matrix<'t>(v1: Var<'t>, v2: Var<'t>) -> Result<Var<'t>> {
    Ok(v1
        .matmul(v2)?
        .sigmoid()
        .mul_scalar(ZETA - GAMMA)
        .add_scalar(GAMMA)
        .clip(0.0, 1.0))
}

/// `Δ · clamp(⌊W/Δ⌋ + A, qmin, qmax)` with a straight-through floor.
pub fn compensated_quant<'t>(w: Var<'t>, step: Var<'t>, a: Var<'t>, spec: &QuantSpec) -> Result<Var<'t>> {
    if spec.rounding != Rounding::Floor {
        return Err(Error::config("compensated quantization requires floor rounding"));
    }
    if w.shape() != a.shape() {
        return Err(Error::ShapeMismatch {
            op: "compensated_quant",
            lhs: w.shape(),
            rhs: a.shape(),
        });
    }
    if let Some(&bad) = step.value().data().iter().find(|&&s| s.is_nan() || s <= 0.0) {
        return Err(Error::NonPositiveStep(bad));
    }
    let v = w.div(step)?;
    let floor = w.tape().straight_through(v.floor(), v)?;
    floor.add(a)?.clip(spec.qmin(), spec.qmax()).mul(step)
}

/// Integer codes `clamp(⌊W/Δ⌋ + A)` for a binary `A`, evaluated with the
/// same arithmetic as [`compensated_quant`] so that `Δ·codes` reproduces it
/// exactly.
pub fn compensated_codes(w: &Tensor, state: &QuantState, a: &Tensor, spec: &QuantSpec) -> Result<Codes> {
    let tape = Tape::new();
    let step = tape.constant(state.step.clone());
    let q = compensated_quant(tape.constant(w.clone()), step, tape.constant(a.clone()), spec)?;
    let lattice = q.value().div(&state.step)?;
    // q = c·Δ with integer c; dividing back recovers c up to rounding error.
    let values: Vec<i32> = lattice.data().iter().map(|&c| c.round() as i32).collect();
    Ok(Codes {
        shape: w.shape().to_vec(),
        values,
    })
}

/// Weight and exponent of the rounding regulariser. The regulariser is off
/// for the first `warmup` fraction of a window's iterations; over the rest
/// `β` is annealed linearly from `beta_start` to `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerSchedule {
    pub k_reg: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub warmup: f64,
}

impl Default for RegularizerSchedule {
    fn default() -> Self {
        RegularizerSchedule {
            k_reg: 1e-3,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
        }
    }
}

impl RegularizerSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_reg >= 0.0)
            || !(self.beta_end >= 2.0)
            || !(self.beta_start >= self.beta_end)
            || !(0.0..1.0).contains(&self.warmup)
        {
            return Err(Error::config(format!(
                "regulariser needs k_reg >= 0, beta_start >= beta_end >= 2 and warmup in [0, 1), got {self:?}"
            )));
        }
        Ok(())
    }

    fn first_active(&self, total: usize) -> usize {
        (self.warmup * total as f64).floor() as usize
    }

    /// Whether the regulariser applies at iteration `iter` of `total`.
    pub fn active(&self, iter: usize, total: usize) -> bool {
        iter >= self.first_active(total)
    }

    /// `β` at iteration `iter` of `total`.
    pub fn beta(&self, iter: usize, total: usize) -> f64 {
        let start = self.first_active(total);
        let span = total.saturating_sub(start);
        if span <= 1 {
            return self.beta_end;
        }
        let t = iter.saturating_sub(start).min(span - 1) as f64 / (span - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t
    }
}

/// `k_reg · Σ (1 - |2A - 1|^β)`.
pub fn rounding_regularizer<'t>(a: Var<'t>, k_reg: f64, beta: f64) -> Var<'t> {
    a.mul_scalar(2.0)
        .add_scalar(-1.0)
        .abs()
        .pow_scalar(beta)
        .neg()
        .add_scalar(1.0)
        .sum()
        .mul_scalar(k_reg)
}
