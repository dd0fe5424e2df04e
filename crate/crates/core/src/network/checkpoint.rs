//! FVCK parameter checkpoints.
//!
//! ```text
//! magic    4 bytes  "FVCK"
//! version  u32      1
//! count    u64      number of tensors
//! count times:
//!   name_len u16, name (UTF-8)
//!   rank     u8
//!   extents  u64 * rank
//!   values   f64 * prod(extents)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FVCK_MAGIC: &[u8; 4] = b"FVCK";
pub const FVCK_VERSION: u32 = 1;

pub fn encode_fvck(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FVCK_MAGIC);
    out.extend_from_slice(&FVCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn corrupt(offset: usize, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode_fvck(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != FVCK_MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!("bad magic {got:?}, expected \"FVCK\"")));
    }
    let mut pos = 4;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(corrupt(pos, format!("truncated {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != FVCK_VERSION {
        return Err(Error::Format(format!("unsupported FVCK version {version}")));
    }
    let count = u64::from_le_bytes(take(8, "tensor count")?.try_into().unwrap());
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name_bytes = take(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "extent")?.try_into().unwrap()) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("tensor {name} has invalid shape {shape:?}")))?;
        let raw = take(n.saturating_mul(8), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(corrupt(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(tensors)
}

pub fn save_checkpoint(tensors: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_fvck(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fvck(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.5)),
            ("scalar".into(), Tensor::scalar(5.0)),
        ]
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode_fvck(&sample());
        // header + (2 + 8 + 1 + 16 + 48) + (2 + 6 + 1 + 0 + 8)
        assert_eq!(bytes.len(), 16 + 75 + 17);
        assert_eq!(&bytes[16..18], &[8, 0]);
        assert_eq!(decode_fvck(&bytes).unwrap(), sample());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_fvck(&sample());
        match decode_fvck(&bytes[..40]) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 35),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_fvck(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_fvck(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_byte_identical(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::seeded(seed);
            let tensors: Vec<(String, Tensor)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = crate::rng::normal_vec(&mut rng, n);
                    (format!("t{i}"), Tensor::new(s.clone(), data).unwrap())
                })
                .collect();
            let bytes = encode_fvck(&tensors);
            let back = decode_fvck(&bytes).unwrap();
            prop_assert_eq!(encode_fvck(&back), bytes);
        }
    }
}
