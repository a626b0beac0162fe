#![allow(dead_code)]

use std::path::PathBuf;

use eqpool::data::{gen_synthetic, load_dataset_dir, DatasetSplits, SynthConfig};
use eqpool::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Tensor {
    let mut t = randn(rng, rows, n);
    for r in 0..rows {
        let norm = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_slice_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Power series of exp(A), with no scaling, as an oracle for small ‖A‖.
pub fn series_exp(a: &Tensor, terms: usize) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for k in 1..=terms {
        term = term.matmul(a).unwrap().scale(1.0 / k as f64);
        out = out.add(&term).unwrap();
    }
    out
}

pub fn data_dir(name: &str) -> PathBuf {
    std::env::var_os("EQPOOL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
        .join(name)
}

/// Writes a synthetic dataset to a temporary directory and loads its splits.
pub fn synthetic_splits(cfg: &SynthConfig) -> DatasetSplits {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(cfg).unwrap().write(dir.path()).unwrap();
    load_dataset_dir(dir.path(), 0).unwrap()
}
