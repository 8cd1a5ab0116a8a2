//! Pre-norm decoder-only transformer used as the quantization target.
//!
//! Every block is `x + Attn(LN(x))` followed by `x + MLP(LN(x))` with a GELU
//! MLP of width `4H`. Linear weights are stored `[in, out]` and applied as
//! `x · W + b`. Four activation sites per block feed the six linears:
//!
//! | site        | value                      | consumers   |
//! |-------------|----------------------------|-------------|
//! | `AttnIn`    | first layer-norm output    | q, k, v     |
//! | `AttnOut`   | concatenated head outputs  | o           |
//! | `MlpIn`     | second layer-norm output   | fc1         |
//! | `MlpHidden` | GELU output                | fc2         |

mod train;

pub use train::{plant_activation_outliers, train, OutlierPlanting, TrainSettings};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quant, QuantSpec};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 6,
            hidden: 64,
            heads: 4,
            vocab: 512,
            seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 || self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl Linear {
    pub const ALL: [Linear; 6] = [Linear::Q, Linear::K, Linear::V, Linear::O, Linear::Fc1, Linear::Fc2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "q",
            Linear::K => "k",
            Linear::V => "v",
            Linear::O => "o",
            Linear::Fc1 => "fc1",
            Linear::Fc2 => "fc2",
        }
    }

    /// Activation site that feeds this linear.
    pub fn site(self) -> Site {
        match self {
            Linear::Q | Linear::K | Linear::V => Site::AttnIn,
            Linear::O => Site::AttnOut,
            Linear::Fc1 => Site::MlpIn,
            Linear::Fc2 => Site::MlpHidden,
        }
    }

    /// `(in, out)` extents.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let (h, m) = (cfg.hidden, cfg.mlp_hidden());
        match self {
            Linear::Fc1 => (h, m),
            Linear::Fc2 => (m, h),
            _ => (h, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    AttnIn,
    AttnOut,
    MlpIn,
    MlpHidden,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::AttnIn, Site::AttnOut, Site::MlpIn, Site::MlpHidden];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnIn => "attn_in",
            Site::AttnOut => "attn_out",
            Site::MlpIn => "mlp_in",
            Site::MlpHidden => "mlp_hidden",
        }
    }

    pub fn channels(self, cfg: &ModelConfig) -> usize {
        match self {
            Site::MlpHidden => cfg.mlp_hidden(),
            _ => cfg.hidden,
        }
    }

    pub fn consumers(self) -> &'static [Linear] {
        match self {
            Site::AttnIn => &[Linear::Q, Linear::K, Linear::V],
            Site::AttnOut => &[Linear::O],
            Site::MlpIn => &[Linear::Fc1],
            Site::MlpHidden => &[Linear::Fc2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones([dim]),
            bias: Tensor::zeros([dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// Indexed by [`Linear::index`].
    pub weights: [Tensor; 6],
    pub biases: [Tensor; 6],
}

impl BlockParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        BlockParams {
            ln1: LayerNorm::identity(cfg.hidden),
            ln2: LayerNorm::identity(cfg.hidden),
            weights: Linear::ALL.map(|l| {
                let (i, o) = l.dims(cfg);
                Tensor::zeros([i, o])
            }),
            biases: Linear::ALL.map(|l| Tensor::zeros([l.dims(cfg).1])),
        }
    }

    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut b = BlockParams::zeros(cfg);
        let residual = (2.0 * cfg.blocks as f64).sqrt();
        for l in Linear::ALL {
            let (i, o) = l.dims(cfg);
            let mut std = 1.0 / (i as f64).sqrt();
            if matches!(l, Linear::O | Linear::Fc2) {
                std /= residual;
            }
            b.weights[l.index()] = normal_tensor(&[i, o], std, rng);
        }
        b
    }

    pub fn weight(&self, l: Linear) -> &Tensor {
        &self.weights[l.index()]
    }

    pub fn bias(&self, l: Linear) -> &Tensor {
        &self.biases[l.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[vocab, hidden]`
    pub tok_emb: Tensor,
    /// `[seq_len, hidden]`
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNorm,
    /// `[hidden, vocab]`
    pub head: Tensor,
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl ModelParams {
    /// Untrained model with small random weights.
    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.blocks).map(|_| BlockParams::random(&config, rng)).collect();
        Ok(ModelParams {
            config,
            tok_emb: normal_tensor(&[config.vocab, config.hidden], 0.1, rng),
            pos_emb: normal_tensor(&[config.seq_len, config.hidden], 0.1, rng),
            blocks,
            ln_f: LayerNorm::identity(config.hidden),
            head: normal_tensor(&[config.hidden, config.vocab], 0.02, rng),
        })
    }

    /// All-zero parameters (identity layer norms) of the right shapes.
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            config,
            tok_emb: Tensor::zeros([config.vocab, config.hidden]),
            pos_emb: Tensor::zeros([config.seq_len, config.hidden]),
            blocks: (0..config.blocks).map(|_| BlockParams::zeros(&config)).collect(),
            ln_f: LayerNorm::identity(config.hidden),
            head: Tensor::zeros([config.hidden, config.vocab]),
        }
    }

    /// Every tensor in a fixed order, for optimisers and serialisation.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([&b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias]);
            out.extend(b.weights.iter());
            out.extend(b.biases.iter());
        }
        out.extend([&self.ln_f.gain, &self.ln_f.bias, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([&mut b.ln1.gain, &mut b.ln1.bias, &mut b.ln2.gain, &mut b.ln2.bias]);
            out.extend(b.weights.iter_mut());
            out.extend(b.biases.iter_mut());
        }
        out.extend([&mut self.ln_f.gain, &mut self.ln_f.bias, &mut self.head]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Full-model logits `[batch·seq, vocab]` for a batch of equal-length
    /// sequences.
    pub fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        let x = embed(&tape, self, batch, false)?;
        let seq = batch[0].len();
        let mut h = x;
        for b in &self.blocks {
            let vars = BlockVars::constant(&tape, b, self.config.heads);
            h = block_forward(h, &vars, seq)?.out;
        }
        let logits = head_forward(h, &HeadVars::constant(&tape, self))?;
        Ok((*logits.value()).clone())
    }

    /// Output of the last block, `[batch·seq, hidden]`.
    pub fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.block_inputs(batch)?.pop().expect("embedding output is always present"))
    }

    /// Hidden state entering every block plus the final block output, each
    /// `[batch·seq, hidden]`.
    pub fn block_inputs(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let seq = batch[0].len();
        let mut h = embed(&tape, self, batch, false)?;
        let mut out = vec![(*h.value()).clone()];
        for b in &self.blocks {
            h = block_forward(h, &BlockVars::constant(&tape, b, self.config.heads), seq)?.out;
            out.push((*h.value()).clone());
        }
        Ok(out)
    }

    /// Activations at every site of every block, each `[batch·seq, channels]`.
    pub fn site_activations(&self, batch: &[Vec<usize>]) -> Result<Vec<[Tensor; 4]>> {
        let tape = Tape::new();
        let seq = batch[0].len();
        let mut h = embed(&tape, self, batch, false)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let r = block_forward(h, &BlockVars::constant(&tape, b, self.config.heads), seq)?;
            out.push(r.sites.map(|s| (*s.value()).clone()));
            h = r.out;
        }
        Ok(out)
    }
}

/// Block parameters placed on a tape.
pub struct BlockVars<'t> {
    pub heads: usize,
    pub ln1: (Var<'t>, Var<'t>),
    pub ln2: (Var<'t>, Var<'t>),
    /// Effective weights, already fake-quantised when the block is quantised.
    pub weights: [Var<'t>; 6],
    pub biases: [Var<'t>; 6],
    /// Activation quantisers per site; `None` runs the block in floating point.
    pub act: Option<[ActQuant<'t>; 4]>,
}

/// Activation quantiser for one site: optional channel divisors, then
/// fake quantisation.
pub struct ActQuant<'t> {
    pub scales: Option<Var<'t>>,
    pub step: Var<'t>,
    pub spec: QuantSpec,
}

impl<'t> ActQuant<'t> {
    fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let x = match self.scales {
            Some(s) => x.div(s)?,
            None => x,
        };
        fake_quant(x, self.step, &self.spec)
    }
}

impl<'t> BlockVars<'t> {
    pub fn from_params(tape: &'t Tape, b: &BlockParams, heads: usize, trainable: bool) -> Self {
        let put = |t: &Tensor| tape.leaf(t.clone(), trainable);
        BlockVars {
            heads,
            ln1: (put(&b.ln1.gain), put(&b.ln1.bias)),
            ln2: (put(&b.ln2.gain), put(&b.ln2.bias)),
            weights: std::array::from_fn(|i| put(&b.weights[i])),
            biases: std::array::from_fn(|i| put(&b.biases[i])),
            act: None,
        }
    }

    pub fn constant(tape: &'t Tape, b: &BlockParams, heads: usize) -> Self {
        BlockVars::from_params(tape, b, heads, false)
    }

    /// All trainable-or-not leaves in the order of [`ModelParams::tensors`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.ln1.0, self.ln1.1, self.ln2.0, self.ln2.1];
        v.extend(self.weights);
        v.extend(self.biases);
        v
    }
}

pub struct HeadVars<'t> {
    pub ln_f: (Var<'t>, Var<'t>),
    pub head: Var<'t>,
}

impl<'t> HeadVars<'t> {
    pub fn from_params(tape: &'t Tape, m: &ModelParams, trainable: bool) -> Self {
        HeadVars {
            ln_f: (tape.leaf(m.ln_f.gain.clone(), trainable), tape.leaf(m.ln_f.bias.clone(), trainable)),
            head: tape.leaf(m.head.clone(), trainable),
        }
    }

    pub fn constant(tape: &'t Tape, m: &ModelParams) -> Self {
        HeadVars::from_params(tape, m, false)
    }
}

/// Normalises every row to zero mean and unit variance, then applies the
/// affine parameters.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let centered = x.sub(x.mean_last())?;
    let std = centered.square().mean_last().add_scalar(LN_EPS).sqrt();
    centered.div(std)?.mul(gain)?.add(bias)
}

pub struct BlockOutput<'t> {
    pub out: Var<'t>,
    /// Raw (pre-quantisation) activation at every site.
    pub sites: [Var<'t>; 4],
}

fn project<'t>(x: Var<'t>, vars: &BlockVars<'t>, l: Linear) -> Result<Var<'t>> {
    x.matmul(vars.weights[l.index()])?.add(vars.biases[l.index()])
}

/// Runs one block on `[batch·seq, hidden]` rows, where each consecutive run
/// of `seq` rows is one causal sequence.
pub fn block_forward<'t>(x: Var<'t>, vars: &BlockVars<'t>, seq: usize) -> Result<BlockOutput<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    if shape.len() != 2 || seq == 0 || !shape[0].is_multiple_of(seq) {
        return Err(Error::InvalidShape {
            shape,
            reason: format!("rows must be a multiple of the sequence length {seq}"),
        });
    }
    let hidden = shape[1];
    let heads = vars.heads;
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::config(format!("hidden size {hidden} is not divisible by {heads} heads")));
    }
    let dh = hidden / heads;
    let batch = shape[0] / seq;
    let quant = |site: Site, v: Var<'t>| -> Result<Var<'t>> {
        match &vars.act {
            Some(a) => a[site.index()].apply(v),
            None => Ok(v),
        }
    };

    let h1 = layer_norm(x, vars.ln1.0, vars.ln1.1)?;
    let a_in = quant(Site::AttnIn, h1)?;
    let q = project(a_in, vars, Linear::Q)?;
    let k = project(a_in, vars, Linear::K)?;
    let v = project(a_in, vars, Linear::V)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut seqs = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = |t: Var<'t>| t.slice(0, b * seq, (b + 1) * seq);
        let (qb, kb, vb) = if batch == 1 { (q, k, v) } else { (rows(q)?, rows(k)?, rows(v)?) };
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = |t: Var<'t>| t.slice(1, hd * dh, (hd + 1) * dh);
            let (qh, kh, vh) = (cols(qb)?, cols(kb)?, cols(vb)?);
            let att = qh.matmul(kh.transpose()?)?.mul_scalar(scale).causal_softmax()?;
            outs.push(att.matmul(vh)?);
        }
        seqs.push(tape.concat(&outs, 1)?);
    }
    let attn = if batch == 1 { seqs[0] } else { tape.concat(&seqs, 0)? };
    let o_in = quant(Site::AttnOut, attn)?;
    let x1 = x.add(project(o_in, vars, Linear::O)?)?;

    let h2 = layer_norm(x1, vars.ln2.0, vars.ln2.1)?;
    let f_in = quant(Site::MlpIn, h2)?;
    let u = project(f_in, vars, Linear::Fc1)?.gelu();
    let u_in = quant(Site::MlpHidden, u)?;
    let out = x1.add(project(u_in, vars, Linear::Fc2)?)?;
    Ok(BlockOutput {
        out,
        sites: [h1, attn, h2, u],
    })
}

/// Token plus positional embeddings, `[batch·seq, hidden]`.
pub fn embed<'t>(tape: &'t Tape, m: &ModelParams, batch: &[Vec<usize>], trainable: bool) -> Result<Var<'t>> {
    let tok = tape.leaf(m.tok_emb.clone(), trainable);
    let pos = tape.leaf(m.pos_emb.clone(), trainable);
    embed_with(tok, pos, m.config, batch)
}

pub fn embed_with<'t>(tok: Var<'t>, pos: Var<'t>, cfg: ModelConfig, batch: &[Vec<usize>]) -> Result<Var<'t>> {
    let seq = check_batch(batch, &cfg)?;
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
    tok.gather_rows(&ids)?.add(pos.gather_rows(&positions)?)
}

fn check_batch(batch: &[Vec<usize>], cfg: &ModelConfig) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::data("empty batch"));
    };
    let seq = first.len();
    if seq == 0 || seq > cfg.seq_len {
        return Err(Error::data(format!("sequence length {seq} outside 1..={}", cfg.seq_len)));
    }
    for s in batch {
        if s.len() != seq {
            return Err(Error::data("sequences in a batch must share one length"));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::data(format!("token {t} out of range for vocabulary {}", cfg.vocab)));
        }
    }
    Ok(seq)
}

/// Final layer norm and vocabulary projection.
pub fn head_forward<'t>(x: Var<'t>, vars: &HeadVars<'t>) -> Result<Var<'t>> {
    layer_norm(x, vars.ln_f.0, vars.ln_f.1)?.matmul(vars.head)
}
