//! `VTID` direction files: magic, version, a vision block and a text block
//! (tag, L, T, D, payload), then a length-prefixed JSON meta block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SteeringMeta, SteeringSet};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Result, VtiError};
use crate::numerics::Tensor;

pub const VTID_MAGIC: &[u8; 4] = b"VTID";
pub const VTID_VERSION: u32 = 1;
const TAG_VISION: u8 = 0;
const TAG_TEXT: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaBlock {
    alpha: f64,
    beta: f64,
    #[serde(flatten)]
    meta: SteeringMeta,
}

pub fn encode_vtid(set: &SteeringSet) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(VTID_MAGIC);
    w.u32(VTID_VERSION);
    let (&[lv, t, dv], &[lt, dt]) = (set.vision.shape(), set.text.shape()) else {
        return Err(VtiError::format("direction tensors must be [L, T, D] and [L, D]"));
    };
    for (tag, l, t, d, data) in [
        (TAG_VISION, lv, t, dv, set.vision.data()),
        (TAG_TEXT, lt, 1, dt, set.text.data()),
    ] {
        w.u8(tag);
        w.usize_u32(l)?;
        w.usize_u32(t)?;
        w.usize_u32(d)?;
        w.f32s(data);
    }
    let meta = serde_json::to_vec(&MetaBlock {
        alpha: set.alpha,
        beta: set.beta,
        meta: set.meta.clone(),
    })?;
    w.usize_u32(meta.len())?;
    w.bytes(&meta);
    Ok(w.finish())
}

pub fn decode_vtid(bytes: &[u8]) -> Result<SteeringSet> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(VTID_MAGIC)?;
    let version = r.u32()?;
    if version != VTID_VERSION {
        return Err(VtiError::format(format!("VTID version {version} is not supported (expected {VTID_VERSION})")));
    }
    let mut blocks = Vec::new();
    for want in [TAG_VISION, TAG_TEXT] {
        let tag = r.u8()?;
        if tag != want {
            return Err(VtiError::format(format!("block tag {tag}, expected {want}")));
        }
        let (l, t, d) = (r.usize()?, r.usize()?, r.usize()?);
        let n = l
            .checked_mul(t)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| VtiError::format("block size overflow"))?;
        let data = r.f32s(n)?;
        blocks.push((l, t, d, data));
    }
    let len = r.usize()?;
    let meta: MetaBlock = serde_json::from_slice(r.take(len)?)
        .map_err(|e| VtiError::format(format!("bad meta block: {e}")))?;
    if r.remaining() != 0 {
        return Err(VtiError::format(format!("{} trailing bytes", r.remaining())));
    }
    let (tv, tt) = (blocks.remove(0), blocks.remove(0));
    if tt.1 != 1 {
        return Err(VtiError::format("text block must have T = 1"));
    }
    let bad = |e: VtiError| VtiError::format(format!("bad payload: {e}"));
    Ok(SteeringSet {
        vision: Tensor::new(vec![tv.0, tv.1, tv.2], tv.3).map_err(bad)?,
        text: Tensor::new(vec![tt.0, tt.2], tt.3).map_err(bad)?,
        alpha: meta.alpha,
        beta: meta.beta,
        meta: meta.meta,
    })
}

pub fn write_vtid(path: impl AsRef<Path>, set: &SteeringSet) -> Result<()> {
    std::fs::write(path, encode_vtid(set)?)?;
    Ok(())
}

pub fn read_vtid(path: impl AsRef<Path>) -> Result<SteeringSet> {
    decode_vtid(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SteeringSet {
        SteeringSet {
            vision: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap(),
            text: Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
            alpha: 0.2,
            beta: 0.4,
            meta: SteeringMeta {
                examples: 3,
                masks: 5,
                mask_ratio: 0.99,
                seed: 42,
                checkpoint: "ab".into(),
                degenerate_vision: vec![],
                degenerate_text: vec![1],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = encode_vtid(&sample()).unwrap();
        let back = decode_vtid(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode_vtid(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = encode_vtid(&sample()).unwrap();
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(matches!(decode_vtid(&bytes[..cut]), Err(VtiError::Format(_))));
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_vtid(&v2), Err(VtiError::Format(_))));
    }
}
