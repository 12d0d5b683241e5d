#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ppd_core::datagen::{sample_task, PriorConfig, StreamSeed};
use ppd_core::gp::ContextSet;
use ppd_testkit::Mat;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn to_mat(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    to_mat(x)
}

/// `n × d` matrix of `N(0, I/d)` draws.
pub fn gaussian_design(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = StreamSeed::new(seed, 0xD0).rng();
    let s = 1.0 / (d as f64).sqrt();
    DMatrix::from_fn(n, d, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

/// A context of exactly `n` points from the RBF prior in `d` dimensions.
pub fn rbf_context(n: usize, d: usize, seed: u64) -> ContextSet {
    let prior = PriorConfig::rbf_default(d).with_n_range(n, n);
    let mut rng = StreamSeed::new(seed, 1).rng();
    sample_task(&prior, &mut rng).unwrap().0
}

pub fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
