use super::{read_file, write_file};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CBQT";

/// A flat token stream with its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub vocab: u32,
    pub tokens: Vec<u32>,
}

impl TokenFile {
    /// Header (`CBQT`, vocab `u32`, token width `u32`, count `u64`) followed
    /// by the tokens at the narrowest width that fits the vocabulary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width: u32 = if self.vocab <= 1 << 16 { 2 } else { 4 };
        let mut out = Vec::with_capacity(20 + self.tokens.len() * width as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for &t in &self.tokens {
            if width == 2 {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            } else {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic("token"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
        let vocab = u32_at(4);
        let width = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("eight bytes")) as usize;
        if width != 2 && width != 4 {
            return Err(Error::data(format!("unsupported token width {width}")));
        }
        let body = &bytes[20..];
        if Some(body.len()) != count.checked_mul(width) {
            return Err(Error::data(format!(
                "token file declares {count} tokens of {width} bytes but holds {} bytes",
                body.len()
            )));
        }
        let tokens: Vec<u32> = body
            .chunks_exact(width)
            .map(|c| if width == 2 { u16::from_le_bytes([c[0], c[1]]) as u32 } else { u32::from_le_bytes([c[0], c[1], c[2], c[3]]) })
            .collect();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::data(format!("token {t} out of range for vocabulary {vocab}")));
        }
        Ok(TokenFile { vocab, tokens })
    }
}

pub fn write_tokens(path: &Path, file: &TokenFile) -> Result<()> {
    write_file(path, file.to_bytes())?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<TokenFile> {
    TokenFile::from_bytes(&read_file(path)?)
}
