#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ttac::engine::{ClusterBank, SourceAnchors};
use ttac::gauss::GaussianParams;
use ttac::stats::Clip;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// A well-conditioned SPD matrix `AAᵀ/d + floor·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = normal_matrix(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianParams {
    let mean = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    GaussianParams::new(mean, random_spd(rng, d, 0.2)).unwrap()
}

pub fn random_anchors(rng: &mut ChaCha8Rng, k: usize, d: usize) -> SourceAnchors {
    let classes: Vec<GaussianParams> = (0..k).map(|_| random_gaussian(rng, d)).collect();
    let global = random_gaussian(rng, d);
    SourceAnchors::new(classes, vec![1.0 / k as f64; k], global).unwrap()
}

/// A bank that has already absorbed `history` random rows per estimate, so
/// every covariance is well conditioned.
pub fn warmed_bank(rng: &mut ChaCha8Rng, anchors: &SourceAnchors, history: usize, clip: Clip) -> ClusterBank {
    let d = anchors.dim();
    let mut bank = ClusterBank::from_anchors(anchors, clip, clip).unwrap();
    let shift: f64 = rng.random_range(0.2..0.8);
    let g = normal_matrix(rng, history, d).add_scalar(shift);
    bank.global_mut().update_global(&g).unwrap();
    for c in bank.clusters_mut() {
        let x = normal_matrix(rng, history, d).add_scalar(shift);
        c.update_global(&x).unwrap();
    }
    bank
}

/// Largest entrywise relative error, with entries below `floor` times the
/// largest reference magnitude compared in absolute terms against that floor.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor * scale))
        .fold(0.0, f64::max)
}
