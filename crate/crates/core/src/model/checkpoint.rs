//! VTIM checkpoint container.
//!
//! ```text
//! "VTIM"  version u32  11 x u32 config words (ModelConfig field order)
//! per tensor, in parameter-layout order: rank u32, dims u32 x rank, f32 payload
//! ```
//!
//! Everything is little-endian.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::forward::ToyLvlm;
use super::params::{ParamLayout, Params};
use super::ModelConfig;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Result, VtiError};

pub const VTIM_MAGIC: &[u8; 4] = b"VTIM";
pub const VTIM_VERSION: u32 = 1;

pub fn encode_vtim(model: &ToyLvlm) -> Result<Vec<u8>> {
    let p = model.params();
    let mut w = ByteWriter::new();
    w.bytes(VTIM_MAGIC);
    w.u32(VTIM_VERSION);
    for word in model.config().to_words() {
        w.usize_u32(word)?;
    }
    for e in p.layout().entries() {
        w.usize_u32(e.shape.len())?;
        for &d in &e.shape {
            w.usize_u32(d)?;
        }
        w.f32s(p.get(&e.range));
    }
    Ok(w.finish())
}

pub fn decode_vtim(bytes: &[u8]) -> Result<ToyLvlm> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(VTIM_MAGIC)?;
    let version = r.u32()?;
    if version != VTIM_VERSION {
        return Err(VtiError::format(format!(
            "unsupported VTIM version {version} (reader supports {VTIM_VERSION})"
        )));
    }
    let mut words = [0usize; 11];
    for w in &mut words {
        *w = r.usize()?;
    }
    let config = ModelConfig::from_words(words);
    config
        .validate()
        .map_err(|e| VtiError::format(format!("VTIM config block: {e}")))?;
    let layout = Arc::new(ParamLayout::new(config));
    let mut params = Params::<f32>::zeros(layout.clone());
    for e in layout.entries() {
        let rank = r.usize()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        if shape != e.shape {
            return Err(VtiError::format(format!(
                "tensor {} has shape {shape:?}, expected {:?}",
                e.name, e.shape
            )));
        }
        let values = r.f32s(e.range.len())?;
        params.data_mut()[e.range.clone()].copy_from_slice(&values);
    }
    if r.remaining() != 0 {
        return Err(VtiError::format(format!("{} trailing bytes after VTIM payload", r.remaining())));
    }
    ToyLvlm::new(params).map_err(|e| VtiError::format(format!("VTIM weights: {e}")))
}

pub fn write_vtim(path: impl AsRef<Path>, model: &ToyLvlm) -> Result<()> {
    std::fs::write(path, encode_vtim(model)?)?;
    Ok(())
}

pub fn read_vtim(path: impl AsRef<Path>) -> Result<ToyLvlm> {
    decode_vtim(&std::fs::read(path)?)
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn checkpoint_hash(model: &ToyLvlm) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode_vtim(model)?)))
}
