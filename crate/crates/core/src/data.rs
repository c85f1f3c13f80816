//! Datasets, synthetic generators and file loaders (IDX, CSV).

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::seeding::{self, Stream};
use crate::error::{invalid_arg, OtoError, Result};
use crate::layers::Targets;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(samples, ...per-sample shape)`.
    pub inputs: Tensor<f32>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, targets: Targets) -> Result<Self> {
        let n = inputs.shape()[0];
        let ok = match &targets {
            Targets::Classes(c) => c.len() == n,
            Targets::Values(v) => v.len() % n == 0 && !v.is_empty(),
        };
        if !ok {
            return Err(invalid_arg(format!(
                "{n} samples but {} target entries",
                targets.len_hint()
            )));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Number of target values per sample (1 for class labels).
    pub fn target_width(&self) -> usize {
        match &self.targets {
            Targets::Classes(_) => 1,
            Targets::Values(v) => v.len() / self.len(),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor<f32>, Targets) {
        let x = self.inputs.slice_rows(rows);
        let t = match &self.targets {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Values(v) => {
                let w = v.len() / self.len();
                Targets::Values(rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect())
            }
        };
        (x, t)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(invalid_arg(format!("split point {n} outside 1..{}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (a, ta) = self.batch(&head);
        let (b, tb) = self.batch(&tail);
        Ok((Dataset::new(a, ta)?, Dataset::new(b, tb)?))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Least-squares data with a planted group-sparse coefficient vector.
/// Stored in `f64`; see [`GroupLassoData::to_dataset`] for a model view.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLassoData {
    pub groups: usize,
    pub group_size: usize,
    pub samples: usize,
    /// Row-major `samples x (groups * group_size)`.
    pub design: Vec<f64>,
    pub targets: Vec<f64>,
    pub x_true: Vec<f64>,
    pub support: Vec<usize>,
}

impl GroupLassoData {
    pub fn dim(&self) -> usize {
        self.groups * self.group_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.design[i * d..(i + 1) * d]
    }

    pub fn to_dataset(&self) -> Dataset {
        let inputs = Tensor::new(
            vec![self.samples, self.dim()],
            self.design.iter().map(|&v| v as f32).collect(),
        )
        .expect("design shape");
        Dataset {
            inputs,
            targets: Targets::Values(self.targets.iter().map(|&v| v as f32).collect()),
        }
    }

    /// Little-endian bytes of design and targets, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.design
            .iter()
            .chain(&self.targets)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

pub fn generate_group_lasso(
    groups: usize,
    group_size: usize,
    support: usize,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<GroupLassoData> {
    if support > groups {
        return Err(invalid_arg(format!("support {support} exceeds {groups} groups")));
    }
    if groups == 0 || group_size == 0 || samples == 0 {
        return Err(invalid_arg("group lasso sizes must be positive"));
    }
    let mut rng = seeding::rng(seed, Stream::GroupLasso);
    let d = groups * group_size;
    let design: Vec<f64> = (0..samples * d).map(|_| normal(&mut rng)).collect();
    let mut planted = sample(&mut rng, groups, support).into_vec();
    planted.sort_unstable();
    let mut x_true = vec![0.0; d];
    for &g in &planted {
        for v in &mut x_true[g * group_size..(g + 1) * group_size] {
            *v = normal(&mut rng);
        }
    }
    let targets = (0..samples)
        .map(|i| {
            let row = &design[i * d..(i + 1) * d];
            let clean: f64 = row.iter().zip(&x_true).map(|(a, x)| a * x).sum();
            let e = normal(&mut rng);
            clean + noise * e
        })
        .collect();
    Ok(GroupLassoData {
        groups,
        group_size,
        samples,
        design,
        targets,
        x_true,
        support: planted,
    })
}

/// Gaussian class blobs: centers `~ N(0, separation^2 I)`, samples add
/// unit-variance noise. Labels cycle through the classes.
pub fn generate_blobs(classes: usize, dim: usize, samples: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || samples == 0 {
        return Err(invalid_arg("blobs need at least 2 classes, dim > 0 and samples > 0"));
    }
    let mut rng = seeding::rng(seed, Stream::Blobs);
    let centers: Vec<f64> = (0..classes * dim).map(|_| separation * normal(&mut rng)).collect();
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c);
        for j in 0..dim {
            data.push((centers[c * dim + j] + normal(&mut rng)) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![samples, dim], data)?, Targets::Classes(labels))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| OtoError::Format {
            offset: at as u64,
            detail: format!("truncated {what}"),
        })
}

fn check_magic(buf: &[u8], want: u32) -> Result<()> {
    let m = be_u32(buf, 0, "magic")?;
    if m != want {
        return Err(OtoError::Format {
            offset: 0,
            detail: format!("magic {m:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn payload(buf: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    if buf.len() < at + len {
        return Err(OtoError::Format {
            offset: buf.len() as u64,
            detail: format!("payload needs {len} bytes from offset {at}"),
        });
    }
    if buf.len() > at + len {
        return Err(OtoError::Format {
            offset: (at + len) as u64,
            detail: "trailing bytes after payload".into(),
        });
    }
    Ok(&buf[at..])
}

/// Raw IDX images: `(count, rows, cols)` and pixel bytes.
pub fn decode_idx_images(buf: &[u8]) -> Result<((usize, usize, usize), &[u8])> {
    check_magic(buf, IDX_IMAGES)?;
    let n = be_u32(buf, 4, "image count")? as usize;
    let h = be_u32(buf, 8, "row count")? as usize;
    let w = be_u32(buf, 12, "column count")? as usize;
    Ok(((n, h, w), payload(buf, 16, n * h * w)?))
}

pub fn decode_idx_labels(buf: &[u8]) -> Result<&[u8]> {
    check_magic(buf, IDX_LABELS)?;
    let n = be_u32(buf, 4, "label count")? as usize;
    payload(buf, 8, n)
}

pub fn encode_idx_images(dims: (usize, usize, usize), pixels: &[u8]) -> Vec<u8> {
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for e in [dims.0, dims.1, dims.2] {
        out.extend_from_slice(&(e as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| OtoError::io(path, e))
}

/// Images become `(n, 1, h, w)` floats in `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ibuf = read_file(images)?;
    let lbuf = read_file(labels)?;
    let ((n, h, w), pixels) = decode_idx_images(&ibuf)?;
    let lab = decode_idx_labels(&lbuf)?;
    if lab.len() != n {
        return Err(OtoError::Format {
            offset: 4,
            detail: format!("{n} images but {} labels", lab.len()),
        });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(OtoError::Format {
            offset: 4,
            detail: "empty image set".into(),
        });
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        Targets::Classes(lab.iter().map(|&l| l as usize).collect()),
    )
}

/// Numeric CSV with the class label in the last column.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| OtoError::Config(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| OtoError::Config(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| OtoError::Config(format!("{} record {}: {what}", path.display(), line + 1));
        if rec.len() < 2 {
            return Err(bad("need at least one feature and a label"));
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(bad("ragged row"));
        }
        for field in rec.iter().take(rec.len() - 1) {
            data.push(field.trim().parse::<f32>().map_err(|_| bad("non-numeric feature"))?);
        }
        let label = rec[rec.len() - 1].trim();
        labels.push(label.parse::<usize>().map_err(|_| bad("label is not a class index"))?);
    }
    let Some(width) = width else {
        return Err(OtoError::Config(format!("{}: no records", path.display())));
    };
    Dataset::new(
        Tensor::new(vec![labels.len(), width - 1], data)?,
        Targets::Classes(labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_empty_support_gives_zero_targets() {
        let d = generate_group_lasso(4, 3, 0, 10, 0.0, 1).unwrap();
        assert!(d.targets.iter().all(|&y| y == 0.0));
        assert!(generate_group_lasso(4, 3, 5, 10, 0.0, 1).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_group_lasso(6, 2, 3, 20, 0.1, 7).unwrap();
        let b = generate_group_lasso(6, 2, 3, 20, 0.1, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.support.len(), 3);
        let c = generate_group_lasso(6, 2, 3, 20, 0.1, 8).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert_eq!(generate_blobs(3, 4, 30, 2.0, 1).unwrap(), generate_blobs(3, 4, 30, 2.0, 1).unwrap());
    }

    #[test]
    fn idx_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images((1, 2, 3), &[0; 6])).unwrap();
        fs::write(&lp, encode_idx_labels(&[7])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.inputs.shape(), &[1, 1, 2, 3]);
        assert!(d.inputs.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.targets, Targets::Classes(vec![7]));
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images((2, 1, 1), &[1, 2])).unwrap();
        fs::write(&lp, encode_idx_labels(&[0])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(OtoError::Format { .. })));

        let bytes = encode_idx_images((2, 2, 2), &[9; 8]);
        match decode_idx_images(&bytes[..bytes.len() - 3]) {
            Err(OtoError::Format { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_idx_labels(&bytes), Err(OtoError::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_last_column_is_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "a,b,y\n1.5,2,0\n-1,0.25,1\n").unwrap();
        let d = load_csv(&p, true).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 2]);
        assert_eq!(d.inputs.data(), &[1.5, 2.0, -1.0, 0.25]);
        assert_eq!(d.targets, Targets::Classes(vec![0, 1]));
        fs::write(&p, "1,x,0\n").unwrap();
        assert!(load_csv(&p, false).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let d = generate_blobs(2, 3, 10, 1.0, 0).unwrap();
        let (a, b) = d.split_at(6).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        assert_eq!(&b.inputs.data()[..3], &d.inputs.data()[18..21]);
    }
}
