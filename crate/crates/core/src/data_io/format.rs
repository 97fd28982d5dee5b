//! Binary feature files.
//!
//! ```text
//! offset  size            field
//! 0       4               magic "DVSA"
//! 4       4               version (u32 LE)
//! 8       16              N, D, d_v, Q (u32 LE each)
//! 24      8·N·D·d_v       features, f64 LE, instance-major then row-major
//! …       ⌈N·Q/8⌉         candidates, N×Q bits row-major, LSB first
//! …       4·N             true labels (u32 LE)
//! ```

use std::path::Path;

use super::PartialDataset;
use crate::diff_core::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVSA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode(ds: &PartialDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (n, d, dv, q) = (ds.len(), ds.regions(), ds.visual_dim(), ds.num_classes());
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} = {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d * dv + (n * q).div_ceil(8) + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [(n, "N"), (d, "D"), (dv, "d_v"), (q, "Q")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for f in &ds.features {
        for &x in f.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut bits = vec![0u8; (n * q).div_ceil(8)];
    for (b, &v) in ds.candidates.data().iter().enumerate() {
        if v != 0.0 {
            bits[b / 8] |= 1 << (b % 8);
        }
    }
    out.extend_from_slice(&bits);
    for &y in &ds.true_labels {
        out.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PartialDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"DVSA\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let mut dims = [0usize; 4];
    for (slot, what) in dims.iter_mut().zip(["N", "D", "d_v", "Q"]) {
        let offset = r.pos;
        *slot = r.u32(what)? as usize;
        if *slot == 0 {
            return Err(Error::Format {
                offset,
                msg: format!("{what} must be positive"),
            });
        }
    }
    let [n, d, dv, q] = dims;

    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let offset = r.pos;
        let raw = r.take(8 * d * dv, "features")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset,
                msg: format!("instance {i} has non-finite features"),
            });
        }
        features.push(Tensor::matrix(d, dv, data)?);
    }

    let bits_offset = r.pos;
    let bits = r.take((n * q).div_ceil(8), "candidates")?;
    let mut cand = Tensor::zeros(&[n, q]);
    for (b, v) in cand.data_mut().iter_mut().enumerate() {
        if bits[b / 8] >> (b % 8) & 1 == 1 {
            *v = 1.0;
        }
    }

    let labels_offset = r.pos;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = r.u32("true labels")? as usize;
        if y >= q {
            return Err(Error::Format {
                offset: labels_offset + 4 * i,
                msg: format!("instance {i} has label {y} outside {q} classes"),
            });
        }
        if cand.get(i, y) != 1.0 {
            return Err(Error::Format {
                offset: bits_offset + i * q / 8,
                msg: format!("instance {i}: true label {y} missing from its candidate set"),
            });
        }
        labels.push(y);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    PartialDataset::new(features, cand, labels)
}

pub fn save_features(ds: &PartialDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<PartialDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
