//! FVAT feature files.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic    4 bytes  "FVAT"
//! version  u32      1
//! N        u64      sample count
//! T        u32      frames per sample
//! D        u32      feature width
//! K        u32      number of classes
//! N times:
//!   label   i32     -1 = unlabeled
//!   domain  u8      0 = source, 1 = target
//!   pad     3 bytes zero
//!   values  T*D f32, frame-major
//! ```
//!
//! The text twin starts with a header line `#fvat-text 1 T D K` followed by
//! one comma-separated record per sample: label, domain, then the `T*D`
//! values.

use std::path::Path;

use super::sequence::{Dataset, Domain, FeatureSequence};
use crate::error::{Error, Result};

pub const FVAT_MAGIC: &[u8; 4] = b"FVAT";
pub const FVAT_VERSION: u32 = 1;
const TEXT_TAG: &str = "#fvat-text";
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 4;

pub fn encode_fvat(ds: &Dataset) -> Vec<u8> {
    let per_sample = 8 + 4 * ds.frames * ds.dim;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * per_sample);
    out.extend_from_slice(FVAT_MAGIC);
    out.extend_from_slice(&FVAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.frames as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for s in &ds.samples {
        let label = s.label.map_or(-1, |l| l as i32);
        out.extend_from_slice(&label.to_le_bytes());
        out.push(s.domain.index() as u8);
        out.extend_from_slice(&[0, 0, 0]);
        for &v in &s.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_fvat(bytes: &[u8], provenance: &str) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != FVAT_MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!("bad magic {got:?}, expected \"FVAT\"")));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FVAT_VERSION {
        return Err(Error::Format(format!("unsupported FVAT version {version}")));
    }
    let n = r.u64("sample count")?;
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("feature width")? as usize;
    let num_classes = r.u32("class count")? as usize;
    let width = frames * dim;
    let per_sample = 8 + 4 * width as u64;
    let remaining = (bytes.len() - r.pos) as u64;
    if n.checked_mul(per_sample).is_none_or(|need| need > remaining) {
        // Point at the first sample that cannot be complete.
        let whole = remaining / per_sample.max(1);
        return Err(Error::Corrupt {
            offset: r.pos as u64 + whole * per_sample,
            msg: format!("payload truncated: header declares {n} samples, room for {whole}"),
        });
    }
    let mut samples = Vec::with_capacity(n as usize);
    for index in 0..n as usize {
        let label_at = r.pos;
        let label = r.i32("label")?;
        let domain_at = r.pos;
        let domain_byte = r.take(1, "domain")?[0];
        let domain = Domain::from_index(domain_byte).ok_or_else(|| Error::Corrupt {
            offset: domain_at as u64,
            msg: format!("invalid domain byte {domain_byte}"),
        })?;
        let pad_at = r.pos;
        if r.take(3, "padding")? != [0, 0, 0] {
            return Err(Error::Corrupt {
                offset: pad_at as u64,
                msg: "non-zero padding".into(),
            });
        }
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
            l => {
                return Err(Error::Validation {
                    index,
                    msg: format!("label {l} at byte {label_at} outside [0, {num_classes})"),
                })
            }
        };
        let raw = r.take(4 * width, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(FeatureSequence::new(frames, dim, values, label, domain)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Dataset::new(samples, num_classes, frames, dim, provenance)
}

pub fn encode_text(ds: &Dataset) -> String {
    let mut out = format!(
        "{TEXT_TAG} {FVAT_VERSION} {} {} {}\n",
        ds.frames, ds.dim, ds.num_classes
    );
    for s in &ds.samples {
        let label = s.label.map_or(-1, |l| l as i64);
        out.push_str(&format!("{label},{}", s.domain.index()));
        for &v in &s.values {
            out.push_str(&format!(",{}", v as f32));
        }
        out.push('\n');
    }
    out
}

pub fn decode_text(text: &str, provenance: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&TEXT_TAG) || fields.len() != 5 {
        return Err(Error::Format(format!("bad text header {header:?}")));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad header field {s:?}")))
    };
    if num(fields[1])? as u32 != FVAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", fields[1])));
    }
    let (frames, dim, num_classes) = (num(fields[2])?, num(fields[3])?, num(fields[4])?);
    let mut offset = header.len() as u64 + 1;
    let mut samples = Vec::new();
    for (index, line) in lines.enumerate() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |msg: String| Error::Corrupt {
            offset: line_offset,
            msg,
        };
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 2 + frames * dim {
            return Err(corrupt(format!(
                "record {index} has {} fields, expected {}",
                parts.len(),
                2 + frames * dim
            )));
        }
        let label: i64 = parts[0]
            .parse()
            .map_err(|_| corrupt(format!("bad label {:?}", parts[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
            l => {
                return Err(Error::Validation {
                    index,
                    msg: format!("label {l} outside [0, {num_classes})"),
                })
            }
        };
        let domain = parts[1]
            .parse::<u8>()
            .ok()
            .and_then(Domain::from_index)
            .ok_or_else(|| corrupt(format!("bad domain {:?}", parts[1])))?;
        let values = parts[2..]
            .iter()
            .map(|p| {
                p.parse::<f32>()
                    .map(f64::from)
                    .map_err(|_| corrupt(format!("bad value {p:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(FeatureSequence::new(frames, dim, values, label, domain)?);
    }
    Dataset::new(samples, num_classes, frames, dim, provenance)
}

/// Loads a binary or text FVAT file, detected from its first bytes.
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let provenance = path.display().to_string();
    if bytes.starts_with(TEXT_TAG.as_bytes()) {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Format(format!("text FVAT is not UTF-8: {e}")))?;
        decode_text(text, &provenance)
    } else {
        decode_fvat(&bytes, &provenance)
    }
}

pub fn save_features(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_fvat(ds)).map_err(|e| Error::io(path, e))
}

pub fn save_features_text(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_text(ds)).map_err(|e| Error::io(path, e))
}
