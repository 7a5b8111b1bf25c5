//! Random instances and finite-difference checkers shared by the gradient
//! tests and the acceptance suite.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tast_core::adapter::EnsembleAdapter;
use tast_core::mathcore::Distribution;
use tast_core::supportset::{SupportMode, SupportSet};
use tast_core::tast::{entropy_objective, pseudo_label_objective};
use tast_core::tastbn::ToyBNExtractor;
use tast_core::LinearHead;
use tast_core::Prototypes;

use super::*;

pub struct TastInstance {
    pub adapter: EnsembleAdapter,
    pub member: usize,
    pub batch: Vec<Array1<f64>>,
    pub targets: Vec<Distribution>,
    pub support: SupportSet,
    pub tau: f64,
}

pub fn tast_instance(seed: u64) -> TastInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = [4, 8][rng.random_range(0..2)];
    let d_phi = [2, 4][rng.random_range(0..2)];
    let k = rng.random_range(2..=3);
    let b = rng.random_range(1..=4);
    let n_e = rng.random_range(1..=3);
    let support = random_support(&mut rng, k, d_z, 3);
    let batch = (0..b).map(|_| random_unit(&mut rng, d_z)).collect();
    let targets = (0..b).map(|_| random_distribution(&mut rng, k)).collect();
    TastInstance {
        adapter: random_adapter(&mut rng, d_z, d_phi, n_e),
        member: rng.random_range(0..n_e),
        batch,
        targets,
        support,
        tau: [0.1, 0.5, 1.0][rng.random_range(0..3)],
    }
}

pub fn tast_max_rel_error(inst: &mut TastInstance) -> f64 {
    let means = inst.support.class_means();
    let (_, g) = inst
        .adapter
        .loss_and_gradients_with_targets(inst.member, &inst.batch, &inst.targets, &means, inst.tau)
        .unwrap();
    let i = inst.member;
    let mut worst: f64 = 0.0;
    let loss_at = |a: &EnsembleAdapter, inst: &TastInstance| {
        a.loss_and_gradients_with_targets(i, &inst.batch, &inst.targets, &means, inst.tau)
            .unwrap()
            .0
    };
    let mut a = inst.adapter.clone();
    for idx in 0..a.shared.len() {
        let analytic = g.shared.as_slice().unwrap()[idx];
        let numeric = {
            let orig = a.shared.as_slice().unwrap()[idx];
            a.shared.as_slice_mut().unwrap()[idx] = orig + FD_EPS;
            let up = loss_at(&a, inst);
            a.shared.as_slice_mut().unwrap()[idx] = orig - FD_EPS;
            let down = loss_at(&a, inst);
            a.shared.as_slice_mut().unwrap()[idx] = orig;
            (up - down) / (2.0 * FD_EPS)
        };
        worst = worst.max(rel_error(analytic, numeric));
    }
    for idx in 0..a.fast_r[i].len() {
        let orig = a.fast_r[i][idx];
        a.fast_r[i][idx] = orig + FD_EPS;
        let up = loss_at(&a, inst);
        a.fast_r[i][idx] = orig - FD_EPS;
        let down = loss_at(&a, inst);
        a.fast_r[i][idx] = orig;
        worst = worst.max(rel_error(g.r[idx], (up - down) / (2.0 * FD_EPS)));
    }
    for idx in 0..a.fast_s[i].len() {
        let orig = a.fast_s[i][idx];
        a.fast_s[i][idx] = orig + FD_EPS;
        let up = loss_at(&a, inst);
        a.fast_s[i][idx] = orig - FD_EPS;
        let down = loss_at(&a, inst);
        a.fast_s[i][idx] = orig;
        worst = worst.max(rel_error(g.s[idx], (up - down) / (2.0 * FD_EPS)));
    }
    worst
}


pub fn random_head(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64) -> LinearHead {
    LinearHead::new(
        ndarray::Array2::from_shape_simple_fn((k, d), || rng.random_range(-scale..scale)),
        Array1::from_shape_simple_fn(k, || rng.random_range(-0.5..0.5)),
    )
    .unwrap()
}

pub fn head_fd_error(
    head: &LinearHead,
    analytic_w: &ndarray::Array2<f64>,
    analytic_b: &Array1<f64>,
    loss: impl Fn(&LinearHead) -> f64,
) -> f64 {
    let mut h = head.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..h.weight.len() {
        let numeric = central_diff_head(&mut h, |h| &mut h.weight.as_slice_mut().unwrap()[idx], &loss);
        worst = worst.max(rel_error(analytic_w.as_slice().unwrap()[idx], numeric));
    }
    for idx in 0..h.bias.len() {
        let numeric = central_diff_head(&mut h, |h| &mut h.bias[idx], &loss);
        worst = worst.max(rel_error(analytic_b[idx], numeric));
    }
    worst
}

pub fn central_diff_head(
    h: &mut LinearHead,
    slot: impl Fn(&mut LinearHead) -> &mut f64,
    loss: &impl Fn(&LinearHead) -> f64,
) -> f64 {
    let orig = *slot(h);
    *slot(h) = orig + FD_EPS;
    let up = loss(h);
    *slot(h) = orig - FD_EPS;
    let down = loss(h);
    *slot(h) = orig;
    (up - down) / (2.0 * FD_EPS)
}


pub struct BnInstance {
    pub extractor: ToyBNExtractor,
    pub batch: Vec<Array1<f64>>,
    pub support: SupportSet,
    pub targets: Vec<Distribution>,
    pub tau: f64,
    pub fixed: Option<Prototypes>,
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(-s..s))
}

pub fn bn_instance(seed: u64, d_in: usize, h: usize, d_z: usize, k: usize, b: usize) -> BnInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = ToyBNExtractor::new(
        ndarray::Array2::from_shape_simple_fn((h, d_in), || rng.random_range(-1.0..1.0)),
        uniform(&mut rng, h, 0.5),
        ndarray::Array2::from_shape_simple_fn((d_z, h), || rng.random_range(-1.0..1.0)),
        uniform(&mut rng, d_z, 0.5),
    )
    .unwrap();
    extractor.gamma = uniform(&mut rng, h, 0.5) + 1.0;
    extractor.beta = uniform(&mut rng, h, 0.3);
    let batch: Vec<Array1<f64>> = (0..b).map(|_| uniform(&mut rng, d_in, 1.0)).collect();
    let mut support = SupportSet::init_empty(k, d_in, SupportMode::RawInput).unwrap();
    // every class gets at least one raw entry
    let extra = rng.random_range(0..=k * 2);
    let classes: Vec<usize> = (0..k).chain((0..extra).map(|_| rng.random_range(0..k))).collect();
    let items: Vec<(Array1<f64>, Distribution)> = classes
        .into_iter()
        .map(|c| (uniform(&mut rng, d_in, 1.0), Distribution::one_hot(k, c)))
        .collect();
    support.update(items).unwrap();
    let targets = (0..b).map(|_| random_distribution(&mut rng, k)).collect();
    let fixed = rng.random_bool(0.3).then(|| {
        Prototypes((0..k).map(|_| Some(random_unit(&mut rng, d_z))).collect())
    });
    BnInstance {
        extractor,
        batch,
        support,
        targets,
        tau: [0.1, 0.5, 1.0][rng.random_range(0..3)],
        fixed,
    }
}

pub fn bn_max_rel_error(inst: &BnInstance) -> f64 {
    let loss_at = |e: &ToyBNExtractor| {
        e.loss_and_gradients(&inst.batch, &inst.support, &inst.targets, inst.tau, inst.fixed.as_ref())
            .unwrap()
            .0
    };
    let (_, g) = inst
        .extractor
        .loss_and_gradients(&inst.batch, &inst.support, &inst.targets, inst.tau, inst.fixed.as_ref())
        .unwrap();
    let mut e = inst.extractor.clone();
    let mut worst: f64 = 0.0;
    for j in 0..e.hidden() {
        let numeric = central_diff_param(&mut e, |e| &mut e.gamma[j], &loss_at);
        worst = worst.max(rel_error(g.gamma[j], numeric));
        let numeric = central_diff_param(&mut e, |e| &mut e.beta[j], &loss_at);
        worst = worst.max(rel_error(g.beta[j], numeric));
    }
    worst
}

pub fn central_diff_param<P>(p: &mut P, slot: impl Fn(&mut P) -> &mut f64, loss: &impl Fn(&P) -> f64) -> f64 {
    let orig = *slot(p);
    *slot(p) = orig + FD_EPS;
    let up = loss(p);
    *slot(p) = orig - FD_EPS;
    let down = loss(p);
    *slot(p) = orig;
    (up - down) / (2.0 * FD_EPS)
}

/// Worst relative error of both head objectives on a random instance.
pub fn head_max_rel_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let d = rng.random_range(2..=6);
    let head = random_head(&mut rng, k, d, 3.0);
    let batch: Vec<Array1<f64>> = (0..rng.random_range(1..=5)).map(|_| random_unit(&mut rng, d)).collect();

    let g = entropy_objective(&head, &batch).unwrap();
    let entropy = head_fd_error(&head, &g.weight, &g.bias, |h| entropy_objective(h, &batch).unwrap().loss);

    // pseudo-labels are fixed at the unperturbed head
    let g = pseudo_label_objective(&head, &batch, 0.0).unwrap().unwrap();
    let labels: Vec<usize> = batch.iter().map(|f| head.predict(f.view()).unwrap()).collect();
    let pl = head_fd_error(&head, &g.weight, &g.bias, |h| {
        batch
            .iter()
            .zip(&labels)
            .map(|(f, &y)| -h.probs(f.view()).unwrap().probs()[y].ln())
            .sum::<f64>()
            / batch.len() as f64
    });
    entropy.max(pl)
}

/// Random BN instance with the dimensions drawn from `1000 + seed`.
pub fn random_bn_instance(seed: u64) -> BnInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let d_in = rng.random_range(2..=5);
    let h = rng.random_range(2..=6);
    let d_z = [4, 8][rng.random_range(0..2)];
    let k = rng.random_range(2..=3);
    let b = rng.random_range(2..=4);
    bn_instance(seed, d_in, h, d_z, k, b)
}
