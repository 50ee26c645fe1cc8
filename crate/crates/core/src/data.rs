//! Labeled datasets: synthetic 2-d generators and IDX ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Valid value box shared by every input coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const PIXELS: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `None` for unbounded synthetic data.
    pub range: Option<ValueRange>,
    pub name: String,
    pub split: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        range: Option<ValueRange>,
        name: &str,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad as f64,
                num_classes,
            });
        }
        if let Some(r) = range {
            for (i, x) in inputs.iter().enumerate() {
                if x.data().iter().any(|&v| v < r.lo || v > r.hi) {
                    return Err(Error::InvalidArgument(format!(
                        "input {i} lies outside [{}, {}]",
                        r.lo, r.hi
                    )));
                }
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            range,
            name: name.to_string(),
            split: "all".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    /// Per-coordinate `(min, max)` over the samples.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        let mut bb = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for x in &self.inputs {
            for (b, &v) in bb.iter_mut().zip(x.data()) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        bb
    }

    /// Euclidean diagonal of the sample bounding box.
    pub fn diagonal(&self) -> f64 {
        self.bounding_box()
            .iter()
            .map(|(lo, hi)| (hi - lo).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Width of the value range: the declared box when there is one,
    /// otherwise the widest per-coordinate extent of the samples.
    pub fn extent(&self) -> f64 {
        match self.range {
            Some(r) => r.width(),
            None => self.bounding_box().iter().fold(0.0, |m, (lo, hi)| m.max(hi - lo)),
        }
    }

    pub fn subset(&self, idx: &[usize], split: &str) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            range: self.range,
            name: self.name.clone(),
            split: split.to_string(),
        }
    }

    /// Seeded shuffle into `(train, eval)` with `n_train` training points.
    pub fn split(&self, n_train: usize, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::rng(seed));
        let n_train = n_train.min(self.len());
        (
            self.subset(&idx[..n_train], "train"),
            self.subset(&idx[n_train..], "eval"),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn check_gen(n: usize, noise: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n ≥ 2 samples, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be ≥ 0, got {noise}")));
    }
    Ok(())
}

fn linspace_pi(k: usize, i: usize) -> f64 {
    if k <= 1 {
        0.0
    } else {
        PI * i as f64 / (k - 1) as f64
    }
}

/// Two interleaving half circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1 − cos t, 0.5 − sin t)`, `t ∈ [0, π]`, plus isotropic Gaussian noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, noise)?;
    let mut r = rng::rng(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid sigma");
    let n_outer = n.div_ceil(2);
    let n_inner = n / 2;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = linspace_pi(n_outer, i);
        inputs.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = linspace_pi(n_inner, i);
        inputs.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    let inputs = inputs
        .into_iter()
        .map(|[a, b]| {
            if noise > 0.0 {
                Tensor::from_vec(vec![a + normal.sample(&mut r), b + normal.sample(&mut r)])
            } else {
                Tensor::from_vec(vec![a, b])
            }
        })
        .collect();
    Dataset::new(inputs, labels, 2, None, "two-moons")
}

/// `k` isotropic Gaussian blobs with centres on a circle of radius 2.
pub fn gen_gaussians(n: usize, k: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, spread)?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k ≥ 2 classes, got {k}")));
    }
    let mut r = rng::rng(seed);
    let normal = Normal::new(0.0, spread).expect("valid sigma");
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let a = 2.0 * PI * c as f64 / k as f64;
        inputs.push(Tensor::from_vec(vec![
            2.0 * a.cos() + normal.sample(&mut r),
            2.0 * a.sin() + normal.sample(&mut r),
        ]));
        labels.push(c);
    }
    Dataset::new(inputs, labels, k, None, "gaussians")
}

/// Two interleaved Archimedean spirals with `turns` revolutions.
pub fn gen_spirals(n: usize, turns: f64, noise: f64, seed: u64) -> Result<Dataset> {
    check_gen(n, noise)?;
    let mut r = rng::rng(seed);
    let normal = Normal::new(0.0, noise).expect("valid sigma");
    let per = n.div_ceil(2);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = ((i / 2) as f64 + 1.0) / per as f64;
        let a = 2.0 * PI * turns * t + PI * c as f64;
        inputs.push(Tensor::from_vec(vec![
            t * a.cos() + normal.sample(&mut r),
            t * a.sin() + normal.sample(&mut r),
        ]));
        labels.push(c);
    }
    Dataset::new(inputs, labels, 2, None, "spirals")
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        })
}

/// Reads an IDX image file (`0x00000803`, `n × rows × cols` unsigned
/// bytes) and its label file (`0x00000801`). Inputs are flattened row-major
/// with range `[0, 255]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = std::fs::read(ipath)?;
    let lb = std::fs::read(lpath)?;

    let magic = be_u32(&ib, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: ipath.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(&lb, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: lpath.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&ib, 4)? as usize;
    let rows = be_u32(&ib, 8)? as usize;
    let cols = be_u32(&ib, 12)? as usize;
    let nl = be_u32(&lb, 4)? as usize;
    if n != nl {
        return Err(Error::IdxCountMismatch { images: n, labels: nl });
    }
    let d = rows * cols;
    let need = 16 + n * d;
    if ib.len() < need {
        return Err(Error::Truncated {
            offset: ib.len(),
            needed: need - ib.len(),
        });
    }
    if lb.len() < 8 + n {
        return Err(Error::Truncated {
            offset: lb.len(),
            needed: 8 + n - lb.len(),
        });
    }
    let inputs = (0..n)
        .map(|i| Tensor::from_vec(ib[16 + i * d..16 + (i + 1) * d].iter().map(|&p| p as f64).collect()))
        .collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut ds = Dataset::new(inputs, labels, num_classes, Some(ValueRange::PIXELS), "idx")?;
    ds.name = ipath
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(ds)
}

/// Writes `images` (each `rows × cols` bytes, row-major) and labels in
/// IDX format.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let mut ib = Vec::with_capacity(16 + images.len() * rows * cols);
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ib.extend_from_slice(&(images.len() as u32).to_be_bytes());
    ib.extend_from_slice(&(rows as u32).to_be_bytes());
    ib.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "image has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        ib.extend_from_slice(img);
    }
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    std::fs::write(images_path, ib)?;
    std::fs::write(labels_path, lb)?;
    Ok(())
}
