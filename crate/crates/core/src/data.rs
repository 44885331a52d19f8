//! Dataset binary format and synthetic desk-scale datasets.
//!
//! On-disk layout: 8-byte magic `ADSET\x01\x00\x00`, then `n`, `d`, `C` as
//! 32-bit little-endian unsigned integers, then `n*d` little-endian f32
//! values in `[0,1]` (row-major), then `n` 32-bit little-endian labels.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ImageBatch;
use crate::rng::stream;

pub const DATASET_MAGIC: [u8; 8] = *b"ADSET\x01\x00\x00";

pub fn write_dataset(batch: &ImageBatch, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&DATASET_MAGIC);
    bytes.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(batch.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(batch.num_classes as u32).to_le_bytes());
    for &v in batch.data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &batch.labels {
        bytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || bytes[..8] != DATASET_MAGIC {
        return Err(Error::Dataset(format!("{}: bad magic", path.display())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (n, d, c) = (u32_at(8), u32_at(12), u32_at(16));
    let expect = 20 + n * d * 4 + n * 4;
    if bytes.len() != expect {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let off = 20 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = 20 + n * d * 4 + i * 4;
        labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let data = Array2::from_shape_vec((n, d), data)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    ImageBatch::new(data, labels, c)
}

/// Gaussian class blobs, clipped to `[margin, 1-margin]` so that the threat
/// ball stays inside the box for the epsilons used at desk scale.
///
/// `spread` controls how far class means sit from 0.5; `sigma` is the
/// per-coordinate noise scale. Labels cycle round-robin so classes are
/// balanced.
pub fn synthetic_blobs(
    n: usize,
    d: usize,
    num_classes: usize,
    spread: f64,
    sigma: f64,
    seed: u64,
) -> ImageBatch {
    let mut mean_rng = stream(seed, "blob-means", &[]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..d)
                .map(|_| 0.5 + mean_rng.gen_range(-spread..=spread))
                .collect()
        })
        .collect();
    let lo = 0.05;
    let hi = 0.95;
    let mut data = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        let mut rng = stream(seed, "blob-sample", &[i as u64]);
        for k in 0..d {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data[[i, k]] = (means[y][k] + sigma * g).clamp(lo, hi);
        }
        labels.push(y);
    }
    ImageBatch::new(data, labels, num_classes).expect("blob construction is in-range")
}
