use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{binary_broadcast, gemm, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

/// Recorded operation. Parent ids always precede the node id, so walking the
/// node list backwards is a valid reverse topological order.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    PowScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Abs(usize),
    Clip(usize, f64, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Softmax(usize, usize),
    CausalSoftmax(usize),
    SumAll(usize),
    SumLast(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    StraightThrough { value: usize, carrier: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    RowNorm(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// How [`Tape::straight_through`] produces its forward value.
enum SteMode {
    Plain,
    Record(Vec<Tensor>),
    Replay { residuals: Vec<Tensor>, next: usize },
}

/// Define-by-run computation record.
///
/// Straight-through nodes can additionally be put in record/replay mode:
/// recording stores each `forward_value - carrier` residual, replaying
/// rebuilds the forward value as `carrier + residual`. Replaying a recorded
/// pass at perturbed parameters evaluates the smooth surrogate whose exact
/// derivative is the straight-through gradient, which is what finite
/// differences have to be taken against.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    ste: RefCell<SteMode>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or is not reachable from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but substitutes zeros for a missing gradient.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            ste: RefCell::new(SteMode::Plain),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Start recording straight-through residuals.
    pub fn record_straight_through(&self) {
        *self.ste.borrow_mut() = SteMode::Record(Vec::new());
    }

    /// Stop recording and return the residuals in execution order.
    pub fn take_straight_through_record(&self) -> Vec<Tensor> {
        match std::mem::replace(&mut *self.ste.borrow_mut(), SteMode::Plain) {
            SteMode::Record(r) => r,
            _ => Vec::new(),
        }
    }

    /// Replay residuals from a previous recording on this (fresh) tape.
    pub fn replay_straight_through(&self, residuals: Vec<Tensor>) {
        *self.ste.borrow_mut() = SteMode::Replay { residuals, next: 0 };
    }

    /// Forward pass yields `forward_value`; the backward pass routes the
    /// whole incoming gradient to `gradient_carrier` and none to
    /// `forward_value`.
    pub fn straight_through<'t>(&'t self, forward_value: Var<'t>, gradient_carrier: Var<'t>) -> Result<Var<'t>> {
        let fv = forward_value.value();
        let carrier = gradient_carrier.value();
        if fv.shape() != carrier.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: fv.shape().to_vec(),
                rhs: carrier.shape().to_vec(),
            });
        }
        let value = {
            let mut mode = self.ste.borrow_mut();
            match &mut *mode {
                SteMode::Plain => (*fv).clone(),
                SteMode::Record(list) => {
                    list.push(fv.sub(&carrier)?);
                    (*fv).clone()
                }
                SteMode::Replay { residuals, next } => {
                    let r = residuals
                        .get(*next)
                        .ok_or_else(|| Error::data("straight-through replay exhausted"))?;
                    *next += 1;
                    carrier.add(r)?
                }
            }
        };
        let rg = self.rg(forward_value.id) || self.rg(gradient_carrier.id);
        Ok(self.push(
            value,
            Op::StraightThrough {
                value: forward_value.id,
                carrier: gradient_carrier.id,
            },
            rg,
        ))
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::config("concat needs at least one part and axis 0 or 1"));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        for v in &values {
            let s = v.shape();
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = values.iter().map(|v| v.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for v in &values {
                data.extend_from_slice(v.data());
            }
            (vec![rows, first[1]], data)
        } else {
            let cols: usize = values.iter().map(|v| v.shape()[1]).sum();
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            (vec![rows, cols], data)
        };
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Replays the tape backwards from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let total = nodes.len();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; total];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn unary(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let out_shape = out.shape();
    let val = |i: usize| &nodes[i].value;
    let gt = || Tensor::from_parts(out_shape.to_vec(), g.to_vec());
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
            accumulate(grads, nodes, *b, reduce_to_shape(g, out_shape, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
            let gb: Vec<f64> = reduce_to_shape(g, out_shape, val(*b).shape()).into_iter().map(|x| -x).collect();
            accumulate(grads, nodes, *b, gb);
        }
        Op::Mul(a, b) => {
            let g = gt();
            if nodes[*a].requires_grad {
                let ga = g.mul(val(*b)).expect("broadcast checked in forward");
                accumulate(grads, nodes, *a, reduce_to_shape(ga.data(), out_shape, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                let gb = g.mul(val(*a)).expect("broadcast checked in forward");
                accumulate(grads, nodes, *b, reduce_to_shape(gb.data(), out_shape, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            let g = gt();
            if nodes[*a].requires_grad {
                let ga = g.div(val(*b)).expect("broadcast checked in forward");
                accumulate(grads, nodes, *a, reduce_to_shape(ga.data(), out_shape, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -(a/b)/b
                let gb = g
                    .zip_with(out, "div", |g, y| -g * y)
                    .and_then(|t| t.div(val(*b)))
                    .expect("broadcast checked in forward");
                accumulate(grads, nodes, *b, reduce_to_shape(gb.data(), out_shape, val(*b).shape()));
            }
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MulScalar(a, s) => accumulate(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::PowScalar(a, p) => {
            let p = *p;
            accumulate(grads, nodes, *a, unary(g, val(*a).data(), |g, x| g * p * x.powf(p - 1.0)));
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, unary(g, out.data(), |g, y| g * y)),
        Op::Ln(a) => accumulate(grads, nodes, *a, unary(g, val(*a).data(), |g, x| g / x)),
        Op::Sqrt(a) => accumulate(
            grads,
            nodes,
            *a,
            unary(g, out.data(), |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
        ),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, unary(g, out.data(), |g, y| g * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(grads, nodes, *a, unary(g, out.data(), |g, y| g * (1.0 - y * y))),
        Op::Gelu(a) => accumulate(grads, nodes, *a, unary(g, val(*a).data(), |g, x| g * gelu_grad(x))),
        Op::Abs(a) => accumulate(grads, nodes, *a, unary(g, val(*a).data(), |g, x| g * sign(x))),
        Op::Clip(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            accumulate(
                grads,
                nodes,
                *a,
                unary(g, val(*a).data(), |g, x| if x > lo && x < hi { g } else { 0.0 }),
            );
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bv.data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g, false, &mut gb, false);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let gtr = gt().transpose().expect("matrix");
            accumulate(grads, nodes, *a, gtr.into_data());
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_split(out_shape, *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::CausalSoftmax(a) => {
            let (rows, cols) = (out_shape[0], out_shape[1]);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let lim = (r + 1).min(cols);
                let row = r * cols;
                let dot: f64 = (0..lim).map(|j| g[row + j] * y[row + j]).sum();
                for j in 0..lim {
                    gx[row + j] = y[row + j] * (g[row + j] - dot);
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::SumLast(a) => {
            let x = val(*a);
            let c = x.cols();
            accumulate(grads, nodes, *a, (0..x.len()).map(|i| g[i / c]).collect());
        }
        Op::Slice { src, axis, start } => {
            let s = val(*src).shape();
            let mut gx = vec![0.0; s[0] * s[1]];
            let (rows, cols) = (out_shape[0], out_shape[1]);
            for r in 0..rows {
                for c in 0..cols {
                    let (sr, sc) = if *axis == 0 { (r + start, c) } else { (r, c + start) };
                    gx[sr * s[1] + sc] = g[r * cols + c];
                }
            }
            accumulate(grads, nodes, *src, gx);
        }
        Op::Concat { parts, axis } => {
            let cols = out_shape[1];
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape();
                let mut gp = vec![0.0; ps[0] * ps[1]];
                for r in 0..ps[0] {
                    for c in 0..ps[1] {
                        let (orow, ocol) = if *axis == 0 { (r + offset, c) } else { (r, c + offset) };
                        gp[r * ps[1] + c] = g[orow * cols + ocol];
                    }
                }
                offset += ps[*axis];
                accumulate(grads, nodes, p, gp);
            }
        }
        Op::StraightThrough { value, carrier } => {
            accumulate(grads, nodes, *value, vec![0.0; g.len()]);
            accumulate(grads, nodes, *carrier, g.to_vec());
        }
        Op::GatherRows { table, ids } => {
            let t = val(*table);
            let h = t.cols();
            let mut gt = vec![0.0; t.len()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..h {
                    gt[id * h + c] += g[r * h + c];
                }
            }
            accumulate(grads, nodes, *table, gt);
        }
        Op::CrossEntropy { logits, targets } => {
            let l = val(*logits);
            let v = l.cols();
            let n = targets.len() as f64;
            let mut gl = vec![0.0; l.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = l.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                for c in 0..v {
                    let p = (row[c] - m).exp() / z;
                    let y = if c == t { 1.0 } else { 0.0 };
                    gl[r * v + c] = g[0] * (p - y) / n;
                }
            }
            accumulate(grads, nodes, *logits, gl);
        }
        Op::RowNorm(a) => {
            let x = val(*a);
            let c = x.cols();
            let norms = out.data();
            let gx = (0..x.len())
                .map(|i| {
                    let r = i / c;
                    if norms[r] > 0.0 {
                        g[r] * x.data()[i] / norms[r]
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, gx);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut y = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let m = (0..len).map(|j| d[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (d[base + j * inner] - m).exp();
                y[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                y[base + j * inner] /= z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// The single value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables belong to different tapes");
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = binary_broadcast(&self.value(), &other.value(), name, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::MulScalar(self.id, s), |x| x * s)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// `x^p`; intended for non-negative inputs.
    pub fn pow_scalar(self, p: f64) -> Var<'t> {
        self.unary(Op::PowScalar(self.id, p), |x| x.powf(p))
    }

    pub fn square(self) -> Var<'t> {
        self.pow_scalar(2.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Clamp to `[lo, hi]`. Gradient is 1 strictly inside, 0 outside and at
    /// the boundary itself.
    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clip(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Round half away from zero. Not differentiable: the result is a
    /// constant on the tape.
    pub fn round(self) -> Var<'t> {
        self.tape.constant(self.value().map(f64::round))
    }

    /// Floor; a constant on the tape like [`Var::round`].
    pub fn floor(self) -> Var<'t> {
        self.tape.constant(self.value().map(f64::floor))
    }

    /// Constant copy of the current value.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = self.value().matmul(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Matmul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let y = softmax_forward(&x, axis);
        let rg = self.requires_grad();
        Ok(self.tape.push(y, Op::Softmax(self.id, axis), rg))
    }

    /// Row softmax of a square score matrix where row `t` only sees columns
    /// `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "causal softmax expects a matrix".into(),
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let lim = (r + 1).min(cols);
            let row = x.row(r);
            let m = row[..lim].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..lim {
                let e = (row[j] - m).exp();
                y[r * cols + j] = e;
                z += e;
            }
            for j in 0..lim {
                y[r * cols + j] /= z;
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(vec![rows, cols], y), Op::CausalSoftmax(self.id), rg))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over the last axis, keeping it as an axis of extent 1.
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let rows = x.len() / c;
        let data: Vec<f64> = (0..rows).map(|r| x.row(r).iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let rg = self.requires_grad();
        self.tape.push(Tensor::from_parts(shape, data), Op::SumLast(self.id), rg)
    }

    pub fn mean_last(self) -> Var<'t> {
        let c = self.value().cols() as f64;
        self.sum_last().mul_scalar(1.0 / c)
    }

    /// Euclidean norm of every row (last axis). A 1-D input yields a
    /// one-element result.
    pub fn row_norm(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let rows = x.len() / c;
        let data: Vec<f64> = (0..rows).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let rg = self.requires_grad();
        self.tape.push(Tensor::from_parts(vec![rows], data), Op::RowNorm(self.id), rg)
    }

    /// Half-open slice `start..end` of a matrix along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || axis > 1 || start >= end || end > s[axis] {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("bad slice axis={axis} {start}..{end}"),
            });
        }
        let (rows, cols) = if axis == 0 { (end - start, s[1]) } else { (s[0], end - start) };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            data.extend_from_slice(&x.data()[start * s[1]..end * s[1]]);
        } else {
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[start..end]);
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::Slice { src: self.id, axis, start },
            rg,
        ))
    }

    /// Rows of a `[n, h]` table selected by `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "gather expects a matrix".into(),
            });
        }
        let (n, h) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= n {
                return Err(Error::data(format!("row index {id} out of range for {n} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![ids.len().max(1), h], data),
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let l = self.value();
        if l.rank() != 2 || l.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = l.cols();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::data(format!("target {t} out of range for vocab {v}")));
            }
            total += row_nll(l.row(r), t);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::scalar(total / targets.len() as f64),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }
}

/// Negative log-likelihood of `target` under softmax of `row`.
pub(crate) fn row_nll(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    m + z.ln() - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_annihilator() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
        let c = tape.constant(t(&[2], &[2., 3.]));
        assert_eq!(c.mul(tape.scalar(0.0)).unwrap().value().data(), &[0., 0.]);
    }

    #[test]
    fn add_backward_is_ones() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[3], &[1., 1., 1.]));
        let loss = a.add(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.; 6]);
        // broadcast operand accumulates over the broadcast axis
        assert_eq!(g.get(b).unwrap().data(), &[2.; 3]);
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[3., -1., 2., 7.]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), m.value().data());
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.]);
        let bad = tape.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(matches!(a.matmul(bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.sum() - 1.0).abs() < 1e-12);
        let shifted = tape.constant(t(&[3], &[1001., 1002., 1003.]));
        let ys = shifted.softmax(0).unwrap().value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_and_constant_have_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let unused = tape.param(t(&[2], &[5., 5.]));
        let c = tape.constant(t(&[2], &[3., 3.]));
        let loss = x.mul(c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn straight_through_routes_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.4, 1.6, -2.2]));
        let r = x.round();
        let y = tape.straight_through(r, x).unwrap();
        assert_eq!(y.value().data(), &[0., 2., -2.]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        // a trainable forward-value input receives zeros
        let tape = Tape::new();
        let fv = tape.param(t(&[2], &[1., 2.]));
        let carrier = tape.param(t(&[2], &[0.9, 2.1]));
        let y = tape.straight_through(fv, carrier).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(fv).unwrap().data(), &[0., 0.]);
        assert_eq!(g.get(carrier).unwrap().data(), &[1., 1.]);

        let tape = Tape::new();
        let a = tape.param(t(&[2], &[1., 2.]));
        let b = tape.param(t(&[3], &[1., 2., 3.]));
        assert!(tape.straight_through(a, b).is_err());
    }

    #[test]
    fn clip_boundary_convention() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[-2., -1., 0.5, 1.]));
        let y = x.clip(-1.0, 1.0);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 0., 1., 0.]);
    }

    #[test]
    fn straight_through_record_replay() {
        let tape = Tape::new();
        tape.record_straight_through();
        let x = tape.param(t(&[2], &[0.3, 0.8]));
        let _ = tape.straight_through(x.round(), x).unwrap();
        let res = tape.take_straight_through_record();
        assert_eq!(res.len(), 1);
        let replay = Tape::new();
        replay.replay_straight_through(res);
        let x2 = replay.param(t(&[2], &[0.31, 0.79]));
        let y = replay.straight_through(x2.round(), x2).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 0.01).abs() < 1e-12);
        assert!((v.data()[1] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., 5., 2., 2.]));
        let y = x.causal_softmax().unwrap().value();
        assert_eq!(y.data(), &[1., 0., 0.5, 0.5]);
    }
}
