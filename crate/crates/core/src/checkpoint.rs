//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "OTOCKPT1" | count | { name_len | name (UTF-8) | rank | extents... | f32 payload }*
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OtoError, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OTOCKPT1";

pub fn encode(arrays: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(OtoError::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(OtoError::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let count = c.u32("array count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| OtoError::Format {
                offset: at as u64,
                detail: "array name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let at = c.pos;
        let payload = c.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| OtoError::Format {
            offset: at as u64,
            detail: e.to_string(),
        })?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(OtoError::Format {
            offset: c.pos as u64,
            detail: "trailing bytes after last array".into(),
        });
    }
    Ok(out)
}

/// Every registered array (trainable and statistics) in registry order.
pub fn model_arrays(model: &ModelGraph<f32>) -> Vec<(String, &Tensor<f32>)> {
    model
        .params()
        .iter()
        .map(|p| (p.name.clone(), model.param(p.id)))
        .collect()
}

pub fn save(model: &ModelGraph<f32>, path: &Path) -> Result<()> {
    let bytes = encode(&model_arrays(model));
    let mut f = fs::File::create(path).map_err(|e| OtoError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| OtoError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| OtoError::io(path, e))?;
    decode(&buf)
}

/// Copies arrays into a model whose names and shapes match exactly.
pub fn load_into(model: &mut ModelGraph<f32>, arrays: &[(String, Tensor<f32>)]) -> Result<()> {
    if arrays.len() != model.params().len() {
        return Err(OtoError::Structural(format!(
            "checkpoint has {} arrays, model has {}",
            arrays.len(),
            model.params().len()
        )));
    }
    let infos = model.params().to_vec();
    for (info, (name, t)) in infos.iter().zip(arrays) {
        if &info.name != name || info.shape != t.shape() {
            return Err(OtoError::Structural(format!(
                "checkpoint array {name} {:?} does not match {} {:?}",
                t.shape(),
                info.name,
                info.shape
            )));
        }
        model.param_mut(info.id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelBuilder;
    use crate::layers::Activation;

    #[test]
    fn byte_layout_of_a_single_array() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]);
        let mut expect = b"OTOCKPT1".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn model_round_trip() {
        let m = ModelBuilder::new(&[1, 5, 5])
            .conv_bn(3, 3, 1, 1, Activation::Relu)
            .flatten()
            .linear(4)
            .build(9)
            .unwrap();
        let bytes = encode(&model_arrays(&m));
        let arrays = decode(&bytes).unwrap();
        let mut fresh = ModelBuilder::new(&[1, 5, 5])
            .conv_bn(3, 3, 1, 1, Activation::Relu)
            .flatten()
            .linear(4)
            .build(10)
            .unwrap();
        assert_ne!(fresh, m);
        load_into(&mut fresh, &arrays).unwrap();
        assert_eq!(fresh, m);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0f32; 3]).unwrap();
        let bytes = encode(&[("a".to_string(), &t)]);
        match decode(&bytes[..bytes.len() - 2]) {
            Err(OtoError::Format { offset, .. }) => assert_eq!(offset, 8 + 4 + 4 + 1 + 4 + 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"NOTACKPT"), Err(OtoError::Format { offset: 0, .. })));
    }
}
