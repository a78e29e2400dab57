//! Middlebury `.flo` files.

use std::path::Path;

use gmflow_tensor::{Real, Tensor};

use crate::error::{FlowError, Result};
use crate::types::FlowField;

/// Header tag, the bytes "PIEH" read as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;

/// Encodes `flow` as `.flo` bytes. Values are stored as f32.
pub fn encode_flo<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    if flow.data.data().iter().any(|v| !v.is_finite()) {
        return Err(FlowError::config("flow contains non-finite values"));
    }
    let dim = |n: usize| i32::try_from(n).map_err(|_| FlowError::config("flow too large for .flo"));
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    for v in flow.data.data() {
        out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
    }
    Ok(out)
}

/// Parses `.flo` bytes into a full-resolution field.
pub fn decode_flo<T: Real>(buf: &[u8]) -> Result<FlowField<T>> {
    let err = |offset: usize, reason: String| FlowError::Format {
        offset: offset as u64,
        reason,
    };
    if buf.len() < 12 {
        return Err(err(buf.len(), "truncated header".into()));
    }
    let word = |i: usize| -> [u8; 4] { buf[i..i + 4].try_into().unwrap() };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(err(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w <= 0 || h <= 0 {
        return Err(err(4, format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| err(4, format!("dimensions {w}x{h} overflow")))?;
    let payload = &buf[12..];
    if payload.len() != expected {
        return Err(err(
            12 + payload.len().min(expected),
            format!("{w}x{h} needs {expected} payload bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    FlowField::new(Tensor::new(&[h, w, 2], data)?, 1)
}

pub fn write_flo<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<()> {
    crate::checkpoint::write_atomic(path, &encode_flo(flow)?)
}

pub fn read_flo<T: Real>(path: &Path) -> Result<FlowField<T>> {
    let bytes = std::fs::read(path).map_err(|e| FlowError::io(path, e))?;
    decode_flo(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_file_is_28_bytes() {
        let f = FlowField::new(Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(), 1).unwrap();
        let b = encode_flo(&f).unwrap();
        assert_eq!(b.len(), 28);
        assert_eq!(&b[..4], b"PIEH");
        assert_eq!(decode_flo::<f32>(&b).unwrap(), f);
    }

    #[test]
    fn zero_magic_is_rejected() {
        let mut b = encode_flo(&FlowField::<f32>::zeros(2, 2, 1)).unwrap();
        b[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(
            decode_flo::<f32>(&b),
            Err(FlowError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn short_payload_is_rejected() {
        let b = encode_flo(&FlowField::<f32>::zeros(2, 2, 1)).unwrap();
        assert!(decode_flo::<f32>(&b[..b.len() - 1]).is_err());
        assert!(decode_flo::<f32>(&b[..7]).is_err());
    }
}
