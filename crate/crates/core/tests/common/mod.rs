#![allow(dead_code)]

pub mod oracles;
pub mod tape;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tast_core::adapter::EnsembleAdapter;
use tast_core::mathcore::{norm, Distribution};
use tast_core::supportset::{SupportMode, SupportSet};

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero components.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to `*x`.
pub fn central_diff(x: &mut f64, mut f: impl FnMut() -> f64) -> f64 {
    let orig = *x;
    *x = orig + FD_EPS;
    let up = f();
    *x = orig - FD_EPS;
    let down = f();
    *x = orig;
    let _ = &mut f;
    (up - down) / (2.0 * FD_EPS)
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let n = norm(v.view());
        if n > 0.1 {
            return v / n;
        }
    }
}

/// A random feature-mode support set with 1..=max_per_class entries per class.
pub fn random_support(rng: &mut ChaCha8Rng, k: usize, d: usize, max_per_class: usize) -> SupportSet {
    let mut s = SupportSet::init_empty(k, d, SupportMode::Feature).unwrap();
    for c in 0..k {
        let n = rng.random_range(1..=max_per_class);
        for _ in 0..n {
            s.update([(random_unit(rng, d), Distribution::one_hot(k, c))]).unwrap();
        }
    }
    s
}

/// Adapter whose fast factors are continuous rather than ±1, so every
/// gradient path is exercised.
pub fn random_adapter(rng: &mut ChaCha8Rng, d_z: usize, d_phi: usize, n_e: usize) -> EnsembleAdapter {
    let mut a = EnsembleAdapter::new(d_z, d_phi, n_e, tast_core::RngSeed(rng.random())).unwrap();
    for r in a.fast_r.iter_mut().chain(a.fast_s.iter_mut()) {
        r.mapv_inplace(|x| x * rng.random_range(0.5..1.5));
    }
    a
}

pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Distribution {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Distribution::new(raw.into_iter().map(|x| x / s).collect()).unwrap()
}
