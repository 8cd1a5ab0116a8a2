use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::{Granularity, QuantSpec, Rounding, Target};
use crate::tensor::Tensor;

pub(crate) const DIGEST_LEN: usize = 32;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("extent fits in u32"));
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.len_u32(shape.len());
        shape.iter().for_each(|&d| self.len_u32(d));
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        t.data().iter().for_each(|&x| self.f64(x));
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        self.len_u32(xs.len());
        xs.iter().for_each(|&x| self.f64(x));
    }

    pub fn config(&mut self, c: &ModelConfig) {
        for v in [c.blocks, c.hidden, c.heads, c.vocab, c.seq_len] {
            self.len_u32(v);
        }
    }

    pub fn spec(&mut self, s: &QuantSpec) {
        self.u8(s.bits as u8);
        match s.granularity {
            Granularity::PerTensor => {
                self.u8(0);
                self.u32(0);
            }
            Granularity::PerChannel(axis) => {
                self.u8(1);
                self.len_u32(axis);
            }
        }
        self.u8(match s.rounding {
            Rounding::Nearest => 0,
            Rounding::Floor => 1,
        });
        self.u8(match s.target {
            Target::Weight => 0,
            Target::Activation => 1,
        });
    }

    /// Appends the SHA-256 digest of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::data("file ends unexpectedly")
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    /// Checks magic, trailing digest and version, in that order, and returns
    /// a reader over the payload that follows the version field.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], kind: &'static str, version: u32) -> Result<Self> {
        if buf.len() < 8 + DIGEST_LEN || &buf[..4] != magic {
            return Err(Error::BadMagic(kind));
        }
        let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader::new(body);
        r.pos = 4;
        let found = r.u32()?;
        if found != version {
            return Err(Error::UnsupportedVersion(found));
        }
        Ok(r)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.buf.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.usize()?;
        if rank > 8 {
            return Err(Error::data(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| self.usize()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        if n * 8 > self.buf.len() - self.pos {
            return Err(truncated());
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n * 8 > self.buf.len() - self.pos {
            return Err(truncated());
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn config(&mut self) -> Result<ModelConfig> {
        let c = ModelConfig {
            blocks: self.usize()?,
            hidden: self.usize()?,
            heads: self.usize()?,
            vocab: self.usize()?,
            seq_len: self.usize()?,
        };
        c.validate().map_err(|e| Error::data(e.to_string()))?;
        Ok(c)
    }

    pub fn spec(&mut self) -> Result<QuantSpec> {
        let bits = self.u8()? as u32;
        let granularity = match (self.u8()?, self.usize()?) {
            (0, _) => Granularity::PerTensor,
            (1, axis) => Granularity::PerChannel(axis),
            (g, _) => return Err(Error::data(format!("unknown granularity tag {g}"))),
        };
        let rounding = match self.u8()? {
            0 => Rounding::Nearest,
            1 => Rounding::Floor,
            r => return Err(Error::data(format!("unknown rounding tag {r}"))),
        };
        let target = match self.u8()? {
            0 => Target::Weight,
            1 => Target::Activation,
            t => return Err(Error::data(format!("unknown target tag {t}"))),
        };
        if !(2..=16).contains(&bits) {
            return Err(Error::data(format!("stored bit width {bits} outside [2, 16]")));
        }
        Ok(QuantSpec {
            bits,
            granularity,
            rounding,
            target,
        })
    }

    pub fn finished(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::data("trailing bytes after payload"));
        }
        Ok(())
    }
}
