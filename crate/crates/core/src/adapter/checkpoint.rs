//! Adapter checkpoint format.
//!
//! ```text
//! "SIAD" | version: u16 LE | header_len: u32 LE | JSON header | tensors
//! ```
//!
//! Tensors are little-endian `f32`, written in the fixed order
//! `alpha?, b?, U?, V?, W?` (absent ones skipped), row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{slot_lengths, Adapter, AdapterKind, ModelDims, Params, SLOT_NAMES};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: [u8; 4] = *b"SIAD";
pub const VERSION: u16 = 1;

/// JSON header stored in front of the tensor section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub d: usize,
    pub r: Option<usize>,
    pub alpha_init: f64,
    pub training_config_digest: String,
    pub seed: u64,
}

/// Provenance recorded alongside the tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub alpha_init: f64,
    pub training_config_digest: String,
    pub seed: u64,
}

pub fn encode(adapter: &Adapter, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if !adapter.is_finite() {
        return Err(Error::invalid("refusing to save an adapter with non-finite parameters"));
    }
    let header = CheckpointHeader {
        kind: adapter.kind().name().to_string(),
        d: adapter.dims().d(),
        r: adapter.kind().rank(),
        alpha_init: meta.alpha_init,
        training_config_digest: meta.training_config_digest.clone(),
        seed: meta.seed,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + 4 * adapter.params().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for x in adapter.params().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Adapter, CheckpointHeader), CheckpointError> {
    if bytes.len() < 10 {
        return Err(CheckpointError::CorruptHeader(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header_end = 10usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::CorruptHeader(format!(
                "declared header length {header_len} exceeds file size"
            ))
        })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[10..header_end])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let kind = AdapterKind::from_name(&header.kind, header.r)
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let dims = ModelDims::new(header.d).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

    let lengths = slot_lengths(kind, dims.d());
    let expected = 4 * lengths.iter().sum::<usize>();
    let body = &bytes[header_end..];
    if body.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() != expected {
        return Err(CheckpointError::ShapeMismatch {
            expected,
            found: body.len(),
        });
    }

    let mut params = Params::<f32>::default();
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for ((slot, n), name) in params.slots_mut().into_iter().zip(lengths).zip(SLOT_NAMES) {
        slot.extend(floats.by_ref().take(n));
        if slot.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
    }
    let adapter = Adapter::from_params(kind, dims, params)
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    Ok((adapter, header))
}

pub fn save(adapter: &Adapter, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(adapter, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Adapter, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
