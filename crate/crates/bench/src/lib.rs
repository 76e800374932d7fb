//! Deterministic fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mirnet_core::dataset::{generate, Dataset, GeneratorConfig};
use mirnet_core::diffcore::Tensor;
use mirnet_core::losses::ConstraintRule;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `n x k` label bits with the given density.
pub fn labels(n: usize, k: usize, density: f64, seed: u64) -> Vec<Vec<u8>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..k).map(|_| r.gen_bool(density) as u8).collect()).collect()
}

pub fn bool_rows(bits: &[Vec<u8>]) -> Vec<Vec<bool>> {
    bits.iter().map(|r| r.iter().map(|&b| b == 1).collect()).collect()
}

pub fn scores(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..k).map(|_| r.gen_range(0.0..1.0)).collect()).collect()
}

/// Eight-label 32x32 dataset with two mutual exclusions.
pub fn dataset(n_labeled: usize) -> Dataset {
    let mut cfg = GeneratorConfig::new(vec![0.35, 0.25, 0.3, 0.15, 0.2, 0.1, 0.08, 0.03]);
    cfg.rules = vec![ConstraintRule::mutual_exclusion(0, 1), ConstraintRule::mutual_exclusion(2, 3)];
    generate(&cfg, n_labeled, 0).expect("default generator is feasible").into_dataset()
}
