//! Numeric kernels shared by the rest of the engine.
//!
//! Everything here is a pure function of its inputs. Randomness is drawn
//! from a [`ChaCha8Rng`] built from an [`RngSeed`], so identical seeds give
//! bit-identical draws on every platform.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;
/// Lower clamp applied to predicted probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent seed for a named sub-stream.
    pub fn derive(self, stream: u64) -> RngSeed {
        // splitmix64 finalizer
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

/// A probability vector over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Validates non-negativity and that the entries sum to one within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidConfig("empty distribution".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut p = vec![0.0; k];
        p[class] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::ZeroNormVector);
    }
    Ok(1.0 - dot(a, b) / (na * nb))
}

/// Softmax of `-dists / tau`, shifted by the minimum distance before
/// exponentiation.
pub fn softmax_from_distances(dists: &[f64], tau: f64) -> Distribution {
    debug_assert!(tau > 0.0);
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = dists.iter().map(|d| (-(d - min) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Distribution(exps.into_iter().map(|e| e / total).collect())
}

/// Plain softmax over logits.
pub fn softmax(logits: &[f64]) -> Distribution {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Distribution(exps.into_iter().map(|e| e / total).collect())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &Distribution) -> f64 {
    -p.0.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `-sum target_k ln max(pred_k, 1e-12)`.
pub fn cross_entropy(target: &Distribution, pred: &Distribution) -> f64 {
    debug_assert_eq!(target.len(), pred.len());
    -target
        .0
        .iter()
        .zip(pred.0.iter())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

/// Gaussian matrix with std `sqrt(2 / cols)` (fan-in = `cols`).
pub fn kaiming_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let std = (2.0 / cols as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.len() != param.len() {
        return Err(Error::ShapeMismatch {
            expected: param.len(),
            actual: grad.len(),
        });
    }
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::ShapeMismatch {
            expected: param.len(),
            actual: state.m.len(),
        });
    }
    state.t += 1;
    // an all-zero gradient means the tensor took no part in the loss
    if grad.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const TOL: f64 = 1e-7;

    #[test]
    fn cosine_distance_examples() {
        let d = |a: ndarray::Array1<f64>, b: ndarray::Array1<f64>| {
            cosine_distance(a.view(), b.view()).unwrap()
        };
        assert!((d(array![1.0, 0.0], array![0.0, 1.0]) - 1.0).abs() < TOL);
        assert!(d(array![3.0, 4.0], array![3.0, 4.0]).abs() < TOL);
        let expected = 1.0 - 1.0 / 2f64.sqrt();
        assert!((d(array![1.0, 0.0], array![1.0, 1.0]) - expected).abs() < TOL);
        assert!((expected - 0.2928932).abs() < 1e-7);
    }

    #[test]
    fn cosine_distance_rejects_zero_vectors() {
        let z = array![0.0, 0.0];
        let a = array![1.0, 0.0];
        assert!(matches!(
            cosine_distance(z.view(), a.view()),
            Err(Error::ZeroNormVector)
        ));
        assert!(matches!(
            cosine_distance(a.view(), z.view()),
            Err(Error::ZeroNormVector)
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_from_distances(&[0.5, 0.5, 0.5], 0.1);
        for &x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax_from_distances(&[0.0, 1.0], 0.1);
        let sig = 1.0 / (1.0 + (-10f64).exp());
        assert!((p.probs()[0] - sig).abs() < 1e-12);
        assert!((p.probs()[0] - 0.9999546).abs() < 1e-7);
        assert!((p.probs()[1] - 0.0000454).abs() < 1e-7);
        let q = softmax_from_distances(&[3.25, 4.25], 0.1);
        for (a, b) in p.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&Distribution::one_hot(3, 0)), 0.0);
        let h = shannon_entropy(&Distribution::new(vec![0.5, 0.5]).unwrap());
        assert!((h - 2f64.ln()).abs() < 1e-12);
        for k in 2..10 {
            assert!((shannon_entropy(&Distribution::uniform(k)) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Distribution::one_hot(2, 0);
        assert_eq!(cross_entropy(&t, &t), 0.0);
        let half = Distribution::uniform(2);
        assert!((cross_entropy(&t, &half) - 2f64.ln()).abs() < 1e-12);
        let pred = Distribution::new(vec![0.9, 0.1]).unwrap();
        let ce = cross_entropy(&half, &pred);
        assert!((ce - (-0.5 * 0.9f64.ln() - 0.5 * 0.1f64.ln())).abs() < 1e-12);
        assert!((ce - 1.2040).abs() < 1e-4);
        // one-hot prediction against a target with mass on the zero entry stays finite
        let onehot = Distribution::one_hot(2, 1);
        assert!((cross_entropy(&t, &onehot) + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn kaiming_statistics() {
        let mut rng = RngSeed(11).rng();
        let w = kaiming_normal(1, 8, &mut rng);
        assert_eq!(w.dim(), (1, 8));
        let mut draws = Vec::with_capacity(100_000);
        for _ in 0..12_500 {
            draws.extend(kaiming_normal(1, 8, &mut rng).iter().copied());
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() < 0.01, "std {std}");

        // rows=4, cols=2: std 1, 1e5 draws, 3-sigma band on the mean
        let mut draws = Vec::new();
        for _ in 0..12_500 {
            draws.extend(kaiming_normal(4, 2, &mut rng).iter().copied());
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn kaiming_is_deterministic() {
        let a = kaiming_normal(5, 7, &mut RngSeed(3).rng());
        let b = kaiming_normal(5, 7, &mut RngSeed(3).rng());
        assert_eq!(a, b);
        let c = kaiming_normal(5, 7, &mut RngSeed(4).rng());
        assert_ne!(a, c);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 1e-3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.001).unwrap();
        assert_eq!(st.t, 1);
        let expect = [1.0 - 0.001, -2.0 + 0.001, 0.5 - 0.001];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_two_constant_steps() {
        // hand-evaluated recurrence: with g = 1 both bias-corrected moments are 1
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.1).unwrap();
        let first = 0.1 / (1.0 + ADAM_EPS);
        assert!((p[0] + first).abs() < 1e-12);
        adam_step(&mut p, &[1.0], &mut st, 0.1).unwrap();
        assert!((p[0] + 2.0 * first).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut st, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            d in prop::collection::vec(0.0f64..2.0, 2..8),
            c in -10.0f64..10.0,
            tau in 0.01f64..2.0,
        ) {
            let p = softmax_from_distances(&d, tau);
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            let q = softmax_from_distances(&shifted, tau);
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_shrinks_as_temperature_drops(
            d in prop::collection::vec(0.0f64..2.0, 2..8),
            tau in 0.05f64..2.0,
            factor in 1.0f64..5.0,
        ) {
            prop_assume!(d.iter().any(|x| (x - d[0]).abs() > 1e-6));
            let hot = shannon_entropy(&softmax_from_distances(&d, tau));
            let cold = shannon_entropy(&softmax_from_distances(&d, tau / factor));
            prop_assert!(cold <= hot + 1e-12);
        }

        #[test]
        fn cosine_distance_symmetry_and_scaling(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            s in 0.01f64..100.0,
        ) {
            let a = ndarray::Array1::from(a);
            let b = ndarray::Array1::from(b);
            prop_assume!(norm(a.view()) > 1e-3 && norm(b.view()) > 1e-3);
            let ab = cosine_distance(a.view(), b.view()).unwrap();
            let ba = cosine_distance(b.view(), a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&ab));
            prop_assert!(cosine_distance(a.view(), a.view()).unwrap().abs() < 1e-12);
            let scaled = &a * s;
            prop_assert!((cosine_distance(scaled.view(), b.view()).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn adam_zero_grad_noop_for_any_state(
            p in prop::collection::vec(-3.0f64..3.0, 3),
            m in prop::collection::vec(-1.0f64..1.0, 3),
            v in prop::collection::vec(0.0f64..1.0, 3),
            t in 0u64..50,
        ) {
            let mut st = AdamState { m: m.clone(), v: v.clone(), t };
            let mut q = p.clone();
            adam_step(&mut q, &[0.0; 3], &mut st, 0.01).unwrap();
            prop_assert_eq!(q, p);
            prop_assert_eq!(st.m, m);
            prop_assert_eq!(st.v, v);
            prop_assert_eq!(st.t, t + 1);
        }
    }
}
