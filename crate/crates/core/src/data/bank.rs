//! Vector bank: `"SIVB" | n: u32 LE | d: u32 LE | n*d f32 LE, row-major`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BANK_MAGIC: [u8; 4] = *b"SIVB";
const HEADER: usize = 12;

/// Dense row-major `n x d` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBank {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl VectorBank {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "bank of {n}x{d} needs {} values, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.data.len());
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Bank {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER {
            return Err(bad(format!("file is only {} bytes", bytes.len())));
        }
        if bytes[..4] != BANK_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| bad(format!("header {n}x{d} overflows")))?;
        if bytes.len() - HEADER != expected {
            return Err(bad(format!(
                "header declares {n}x{d} ({expected} bytes) but body has {} bytes",
                bytes.len() - HEADER
            )));
        }
        let data = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { n, d, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
