//! VTIP image container: magic `VTIP`, then version, H, W, C as
//! little-endian `u32`, then `H*W*C` little-endian `f32` values.

use std::path::Path;

use super::{Image, CHANNELS};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Result, VtiError};

pub const VTIP_MAGIC: &[u8; 4] = b"VTIP";
pub const VTIP_VERSION: u32 = 1;

pub fn encode_vtip(image: &Image) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(VTIP_MAGIC);
    w.u32(VTIP_VERSION);
    w.u32(image.height() as u32);
    w.u32(image.width() as u32);
    w.u32(CHANNELS as u32);
    w.f32s(image.data());
    w.finish()
}

pub fn decode_vtip(bytes: &[u8]) -> Result<Image> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(VTIP_MAGIC)?;
    let version = r.u32()?;
    if version != VTIP_VERSION {
        return Err(VtiError::format(format!(
            "unsupported VTIP version {version} (reader supports {VTIP_VERSION})"
        )));
    }
    let (h, w, c) = (r.usize()?, r.usize()?, r.usize()?);
    if c != CHANNELS {
        return Err(VtiError::format(format!("VTIP has {c} channels, expected {CHANNELS}")));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| VtiError::format("VTIP dimensions overflow"))?;
    let data = r.f32s(n)?;
    if r.remaining() != 0 {
        return Err(VtiError::format(format!("{} trailing bytes after VTIP payload", r.remaining())));
    }
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(VtiError::format("VTIP values outside [0, 1]"));
    }
    Image::new(h, w, data)
}

pub fn write_vtip(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    std::fs::write(path, encode_vtip(image))?;
    Ok(())
}

pub fn read_vtip(path: impl AsRef<Path>) -> Result<Image> {
    decode_vtip(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let img = Image::new(1, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode_vtip(&img);
        assert_eq!(&bytes[..4], b"VTIP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(decode_vtip(&bytes).unwrap(), img);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let img = Image::filled(2, 2, [0.1, 0.2, 0.3]).unwrap();
        let bytes = encode_vtip(&img);
        assert!(matches!(decode_vtip(&bytes[..bytes.len() - 1]), Err(VtiError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vtip(&bad), Err(VtiError::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_vtip(&v2), Err(VtiError::Format(_))));
    }
}
