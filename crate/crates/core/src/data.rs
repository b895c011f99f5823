//! Datasets: IDX image files, synthetic generators and epoch batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Vocabulary size of synthetic token sequences.
pub const TOKEN_VOCAB: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, targets: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.ndim() < 2 || features.dim(0) != targets.len() {
            return Err(Error::Dimension(format!(
                "{} targets for features of shape {:?}",
                targets.len(),
                features.shape()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::Contract(format!("target {t} outside {num_classes} classes")));
        }
        Ok(Self { features, targets, num_classes })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Shape of one record.
    pub fn record_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.features.gather_rows(indices)?, indices.iter().map(|&i| self.targets[i]).collect()))
    }

    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.features.rows(0, n)?, self.targets[..n].to_vec(), self.num_classes)
    }
}

/// One epoch of batches: a random permutation cut into chunks of `tau`;
/// a final chunk shorter than `tau` is dropped.
pub fn epoch_batches(n: usize, tau: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(tau.max(1)).map(<[usize]>::to_vec).collect()
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Format { offset: bytes.len(), msg: format!("header truncated, needed 4 bytes at {offset}") })
}

/// Parses an IDX unsigned-byte array, returning its extents and payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format { offset: 0, msg: format!("magic {found:#010x}, expected {magic:#010x}") });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Format { offset: 4 + 4 * i, msg: "zero extent".into() });
    }
    let start = 4 + 4 * ndim;
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(Error::Format { offset: 4, msg: "extents overflow".into() })?;
    let payload = bytes.get(start..).unwrap_or(&[]);
    if payload.len() < len {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("payload truncated: {} of {len} bytes", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(Error::Format { offset: start + len, msg: "trailing bytes after payload".into() });
    }
    Ok((dims, payload))
}

/// Builds a dataset from in-memory IDX image and label files. Images come
/// out as `[n, 1, H, W]` with pixels scaled to `[0, 1]`.
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = parse_idx(labels, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Format { offset: 4, msg: format!("{} images but {} labels", idims[0], ldims[0]) });
    }
    let features =
        Tensor::new(vec![idims[0], 1, idims[1], idims[2]], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = targets.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, targets, num_classes)
}

/// Loads an IDX image/label file pair; gzip-compressed files are detected
/// and decompressed transparently.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    idx_from_bytes(&read_maybe_gzip(images)?, &read_maybe_gzip(labels)?)
}

/// Reinterprets `[n, 1, H, W]` (or `[n, H, W]`) images as `H` timesteps of
/// `W`-dimensional inputs.
pub fn rows_as_sequence(ds: &Dataset) -> Result<Dataset> {
    let s = ds.features.shape();
    let (h, w) = match s.len() {
        4 if s[1] == 1 => (s[2], s[3]),
        3 => (s[1], s[2]),
        _ => return Err(Error::Dimension(format!("expected single-channel images, got {s:?}"))),
    };
    Dataset::new(ds.features.reshape(&[s[0], h, w])?, ds.targets.clone(), ds.num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Class means drawn at random; unit-variance noise overlaps classes.
    GaussianClasses,
    /// Orthonormal class means with noise of norm at most 0.4.
    Separable,
    /// Token ids; each class over-samples its own band of the vocabulary.
    TokenSeq,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-classes" => Ok(SynthKind::GaussianClasses),
            "separable" => Ok(SynthKind::Separable),
            "token-seq" => Ok(SynthKind::TokenSeq),
            _ => Err(Error::Usage(format!("unknown synthetic dataset `{s}`"))),
        }
    }
}

/// Seeded synthetic dataset of `n` records of shape `dims` with balanced
/// classes.
pub fn synth(kind: SynthKind, n: usize, dims: &[usize], classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Contract(format!("need n ≥ classes ≥ 2, got n={n}, classes={classes}")));
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Contract(format!("invalid record shape {dims:?}")));
    }
    let d: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<usize> = (0..n).map(|i| i % classes).collect();
    targets.shuffle(&mut rng);
    let mut shape = vec![n];
    shape.extend_from_slice(dims);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let data: Vec<f64> = match kind {
        SynthKind::Separable => {
            if d < classes {
                return Err(Error::Contract(format!("{classes} orthonormal means need at least {classes} features")));
            }
            let means = orthonormal(classes, d, &mut rng);
            let mut data = Vec::with_capacity(n * d);
            for &t in &targets {
                let noise: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
                let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
                let radius = 0.4 * rng.random::<f64>();
                let s = if norm > 0.0 { radius / norm } else { 0.0 };
                data.extend(means[t].iter().zip(&noise).map(|(m, e)| m + s * e));
            }
            data
        }
        SynthKind::GaussianClasses => {
            let means: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect();
            let mut data = Vec::with_capacity(n * d);
            for &t in &targets {
                data.extend(means[t].iter().map(|m| m + gauss(&mut rng)));
            }
            data
        }
        SynthKind::TokenSeq => {
            let band = TOKEN_VOCAB / classes;
            let mut data = Vec::with_capacity(n * d);
            for &t in &targets {
                for _ in 0..d {
                    let tok = if rng.random::<f64>() < 0.3 {
                        t * band + rng.random_range(0..band)
                    } else {
                        rng.random_range(0..TOKEN_VOCAB)
                    };
                    data.push(tok as f64);
                }
            }
            data
        }
    };
    Dataset::new(Tensor::new(shape, data)?, targets, classes)
}

/// `k` random orthonormal vectors in `R^d` by Gram-Schmidt.
fn orthonormal(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}
