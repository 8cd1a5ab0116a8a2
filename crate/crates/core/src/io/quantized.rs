//! Deployable quantized checkpoints.
//!
//! Linear weights are stored as packed integer codes plus step sizes:
//! two's-complement nibbles (low nibble first) up to 4 bits, one byte up to
//! 8 bits, two bytes above that. Rounding compensation is already folded into
//! the codes, so inference only needs `Δ · codes`.

use super::{read_file, write_file};
use std::path::Path;

use super::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{block_forward, embed_with, head_forward, ActQuant, BlockVars, HeadVars, LayerNorm, ModelConfig};
use crate::outlier::ChannelScales;
use crate::qmodel::Truncation;
use crate::quant::{dequantize, Codes, QuantSpec, QuantState};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"CBQQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredLinear {
    pub spec: QuantSpec,
    pub step: Tensor,
    pub codes: Codes,
    pub bias: Tensor,
    pub truncation: Option<Truncation>,
}

impl StoredLinear {
    /// `Δ · codes`.
    pub fn dequantized(&self) -> Result<Tensor> {
        dequantize(&self.codes, &QuantState::new(self.step.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSite {
    pub spec: QuantSpec,
    pub step: Tensor,
    /// Inputs are divided by these before quantization; the consuming
    /// weights were multiplied by them before their codes were computed.
    pub scales: ChannelScales,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredBlock {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub linears: [StoredLinear; 6],
    pub sites: [StoredSite; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<StoredBlock>,
    pub ln_f: LayerNorm,
    pub head: Tensor,
}

/// Bytes needed for `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u32) -> usize {
    match bits {
        0..=4 => n.div_ceil(2),
        5..=8 => n,
        _ => 2 * n,
    }
}

pub fn pack_codes(values: &[i32], bits: u32) -> Vec<u8> {
    match bits {
        0..=4 => values
            .chunks(2)
            .map(|pair| {
                let lo = (pair[0] as u8) & 0x0f;
                let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                lo | (hi << 4)
            })
            .collect(),
        5..=8 => values.iter().map(|&c| c as i8 as u8).collect(),
        _ => values.iter().flat_map(|&c| (c as i16).to_le_bytes()).collect(),
    }
}

pub fn unpack_codes(bytes: &[u8], n: usize, bits: u32) -> Vec<i32> {
    let sign_nibble = |x: u8| (((x & 0x0f) << 4) as i8 >> 4) as i32;
    match bits {
        0..=4 => (0..n)
            .map(|i| {
                let b = bytes[i / 2];
                sign_nibble(if i % 2 == 0 { b } else { b >> 4 })
            })
            .collect(),
        5..=8 => bytes[..n].iter().map(|&b| b as i8 as i32).collect(),
        _ => bytes[..2 * n]
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    }
}

fn write_ln(w: &mut Writer, ln: &LayerNorm) {
    w.tensor(&ln.gain);
    w.tensor(&ln.bias);
}

fn read_ln(r: &mut Reader<'_>) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: r.tensor()?,
        bias: r.tensor()?,
    })
}

impl QuantizedCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.config(&self.config);
        w.tensor(&self.tok_emb);
        w.tensor(&self.pos_emb);
        for b in &self.blocks {
            write_ln(&mut w, &b.ln1);
            write_ln(&mut w, &b.ln2);
            for l in &b.linears {
                w.spec(&l.spec);
                w.tensor(&l.step);
                w.shape(&l.codes.shape);
                w.bytes(&pack_codes(&l.codes.values, l.spec.bits));
                w.tensor(&l.bias);
                match &l.truncation {
                    Some(t) => {
                        w.u8(1);
                        w.f64(t.threshold);
                        w.u64(t.clipped as u64);
                    }
                    None => w.u8(0),
                }
            }
            for s in &b.sites {
                w.spec(&s.spec);
                w.tensor(&s.step);
                w.f64s(&s.scales.s);
            }
        }
        write_ln(&mut w, &self.ln_f);
        w.tensor(&self.head);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, "quantized checkpoint", FORMAT_VERSION)?;
        let config = r.config()?;
        let tok_emb = r.tensor()?;
        let pos_emb = r.tensor()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let ln1 = read_ln(&mut r)?;
            let ln2 = read_ln(&mut r)?;
            let mut linears = Vec::with_capacity(6);
            for _ in 0..6 {
                let spec = r.spec()?;
                let step = r.tensor()?;
                let shape = r.shape()?;
                let n: usize = shape.iter().product();
                let packed = r.take(packed_len(n, spec.bits))?;
                let codes = Codes {
                    values: unpack_codes(packed, n, spec.bits),
                    shape,
                };
                let bias = r.tensor()?;
                let truncation = match r.u8()? {
                    0 => None,
                    1 => Some(Truncation {
                        threshold: r.f64()?,
                        clipped: r.u64()? as usize,
                    }),
                    t => return Err(Error::data(format!("unknown truncation tag {t}"))),
                };
                linears.push(StoredLinear {
                    spec,
                    step,
                    codes,
                    bias,
                    truncation,
                });
            }
            let mut sites = Vec::with_capacity(4);
            for _ in 0..4 {
                sites.push(StoredSite {
                    spec: r.spec()?,
                    step: r.tensor()?,
                    scales: ChannelScales { s: r.f64s()? },
                });
            }
            blocks.push(StoredBlock {
                ln1,
                ln2,
                linears: linears.try_into().expect("six linears"),
                sites: sites.try_into().expect("four sites"),
            });
        }
        let ln_f = read_ln(&mut r)?;
        let head = r.tensor()?;
        r.finished()?;
        let ckpt = QuantizedCheckpoint {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let bad = |what: &str| Err(Error::data(format!("checkpoint {what} has an inconsistent shape")));
        if self.tok_emb.shape() != [c.vocab, c.hidden] || self.pos_emb.shape() != [c.seq_len, c.hidden] {
            return bad("embedding");
        }
        if self.head.shape() != [c.hidden, c.vocab] {
            return bad("head");
        }
        for b in &self.blocks {
            for (l, lin) in crate::model::Linear::ALL.iter().zip(&b.linears) {
                let (i, o) = l.dims(c);
                if lin.codes.shape != [i, o] || lin.bias.shape() != [o] {
                    return bad(l.name());
                }
            }
        }
        Ok(())
    }

    /// Output of the last block `[batch·seq, hidden]` under the deployed
    /// model: dequantized weights and fake-quantized activations.
    pub fn final_hidden(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        Ok((*self.hidden_on(&tape, batch, None)?.value()).clone())
    }

    /// Output of every block, each `[batch·seq, hidden]`.
    pub fn block_outputs(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let mut outs = Vec::with_capacity(self.blocks.len());
        self.hidden_on(&tape, batch, Some(&mut outs))?;
        Ok(outs)
    }

    fn hidden_on<'t>(&self, tape: &'t Tape, batch: &[Vec<usize>], mut outs: Option<&mut Vec<Tensor>>) -> Result<Var<'t>> {
        let mut h = embed_with(
            tape.constant(self.tok_emb.clone()),
            tape.constant(self.pos_emb.clone()),
            self.config,
            batch,
        )?;
        let seq = batch[0].len();
        for b in &self.blocks {
            let weights = b
                .linears
                .iter()
                .map(|l| l.dequantized().map(|w| tape.constant(w)))
                .collect::<Result<Vec<_>>>()?;
            let vars = BlockVars {
                heads: self.config.heads,
                ln1: (tape.constant(b.ln1.gain.clone()), tape.constant(b.ln1.bias.clone())),
                ln2: (tape.constant(b.ln2.gain.clone()), tape.constant(b.ln2.bias.clone())),
                weights: weights.try_into().expect("six linears"),
                biases: std::array::from_fn(|i| tape.constant(b.linears[i].bias.clone())),
                act: Some(std::array::from_fn(|i| {
                    let s = &b.sites[i];
                    ActQuant {
                        scales: (!s.scales.is_identity()).then(|| tape.constant(s.scales.as_tensor())),
                        step: tape.constant(s.step.clone()),
                        spec: s.spec,
                    }
                })),
            };
            h = block_forward(h, &vars, seq)?.out;
            if let Some(o) = outs.as_deref_mut() {
                o.push((*h.value()).clone());
            }
        }
        Ok(h)
    }

    /// Logits `[batch·seq, vocab]` of the deployed model.
    pub fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        let h = self.hidden_on(&tape, batch, None)?;
        let head = HeadVars {
            ln_f: (tape.constant(self.ln_f.gain.clone()), tape.constant(self.ln_f.bias.clone())),
            head: tape.constant(self.head.clone()),
        };
        Ok((*head_forward(h, &head)?.value()).clone())
    }
}

pub fn save_quantized(path: &Path, ckpt: &QuantizedCheckpoint) -> Result<()> {
    write_file(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedCheckpoint> {
    QuantizedCheckpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nibble_packing_round_trips() {
        let codes: Vec<i32> = (-8..8).chain([3, -1, 7]).collect();
        let packed = pack_codes(&codes, 4);
        assert_eq!(packed.len(), packed_len(codes.len(), 4));
        assert_eq!(packed.len(), codes.len().div_ceil(2));
        assert_eq!(unpack_codes(&packed, codes.len(), 4), codes);
        // low nibble first
        assert_eq!(pack_codes(&[1, -1], 4), vec![0xf1]);
    }

    #[test]
    fn byte_and_short_packing_round_trip() {
        let b: Vec<i32> = vec![-128, -1, 0, 5, 127];
        assert_eq!(unpack_codes(&pack_codes(&b, 8), b.len(), 8), b);
        let s: Vec<i32> = vec![-32768, -300, 0, 1000, 32767];
        assert_eq!(unpack_codes(&pack_codes(&s, 16), s.len(), 16), s);
    }
}
