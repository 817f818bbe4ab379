//! `SWDT` tensor container.
//!
//! Layout: magic `SWDT`, u8 version (1), u8 dtype (0 = f32), u8 ndim, `ndim`
//! little-endian u32 extents, then the little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SWDT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes a container; `origin` names the source in error messages.
pub fn decode<T: Element>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let bad = |detail: String| Error::load(origin, detail);
    if bytes.len() < 7 {
        return Err(bad(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(bad(format!("bad rank {ndim} or truncated extents")));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let Some(n) = n.filter(|&n| n > 0) else {
        return Err(bad(format!("invalid extents {shape:?}")));
    };
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

/// Writes through a temporary file and a rename so readers never observe a
/// partial container.
pub fn write<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn read<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..7], &[b'S', b'W', b'D', b'T', 1, 0, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 15 + 24);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::<f32>::new(&[1, 2, 2], vec![0.1, -3.5, f32::MIN_POSITIVE, 7e9]).unwrap();
        let back: Tensor<f32> = decode(&encode(&t), Path::new("mem")).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn truncated_payload_is_a_load_error() {
        let t = Tensor::<f32>::zeros(&[4, 4]).unwrap();
        let b = encode(&t);
        let err = decode::<f32>(&b[..b.len() - 3], Path::new("x.swdt")).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        assert!(err.to_string().contains("x.swdt"));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = encode(&Tensor::<f32>::zeros(&[1]).unwrap());
        b[0] = b'X';
        assert!(matches!(decode::<f32>(&b, Path::new("m")), Err(Error::Load { .. })));
        assert!(decode::<f32>(&[], Path::new("m")).is_err());
    }
}
