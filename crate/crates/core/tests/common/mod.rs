#![allow(dead_code)]

use std::path::PathBuf;

use mtrep::harness::ExperimentConfig;
use mtrep::model::{ArmSet, LinearInstance, NoiseModel, TaskEnsemble};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, d, k).qr().q()
}

pub fn unit_arms(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = v.norm();
            v / norm
        })
        .collect()
}

/// Random unit arms, a random planted subspace and unit prediction vectors.
pub fn random_linear(seed: u64, d: usize, k: usize, tasks: usize, n: usize, noise: NoiseModel) -> LinearInstance {
    let mut r = rng(seed);
    let arms = ArmSet::new(unit_arms(&mut r, d, n)).unwrap();
    let b = orthonormal(&mut r, d, k);
    let mut w = gaussian_matrix(&mut r, k, tasks);
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    LinearInstance::new(arms, TaskEnsemble::new(b, w).unwrap(), noise).unwrap()
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).unwrap()
}
