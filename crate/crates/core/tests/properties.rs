mod common;

use common::random_unit;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tast_core::bench::{generate, run_online, train_source_head, Method, RunConfig, Shift, SourceModel, SyntheticSpec, TrainOptions};
use tast_core::mathcore::{shannon_entropy, softmax, Distribution};
use tast_core::supportset::{SupportMode, SupportSet};
use tast_core::tast::{tast_n_predict, PrototypeEngine};
use tast_core::{EnsembleAdapter, LinearHead, RngSeed, TastConfig, TastEngine};

fn unit_rows(seed: u64, n: usize, d: usize) -> Vec<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_unit(&mut rng, d)).collect()
}

fn head(seed: u64, k: usize, d: usize) -> LinearHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LinearHead::new(
        Array2::from_shape_simple_fn((k, d), || rng.random_range(-2.0..2.0)),
        Array1::from_shape_simple_fn(k, || rng.random_range(-0.2..0.2)),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbors_agree_with_brute_force(seed in any::<u64>(), n in 1usize..40, n_s in 1usize..12, dup in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SupportSet::init_empty(3, 4, SupportMode::Feature).unwrap();
        let keys: Vec<Array1<f64>> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
        let mut items: Vec<(Array1<f64>, Distribution)> =
            keys.iter().map(|k| (k.clone(), Distribution::one_hot(3, rng.random_range(0..3)))).collect();
        for j in 0..dup.min(n) {
            items.push((keys[j].clone(), Distribution::one_hot(3, j % 3)));
        }
        set.update(items).unwrap();
        let q = if dup > 0 { keys[0].clone() } else { random_unit(&mut rng, 4) };
        let fast = set.nearest_neighbors(q.view(), n_s).unwrap();
        prop_assert_eq!(fast.len(), n_s.min(set.len()));
        prop_assert_eq!(&fast, &set.brute_force_neighbors(q.view(), n_s).unwrap());
        let ds: Vec<f64> = fast.iter().map(|n| n.distance).collect();
        prop_assert!(ds.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn filter_keeps_lowest_entropy(seed in any::<u64>(), n in 0usize..50, cap in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SupportSet::init_empty(3, 2, SupportMode::Feature).unwrap();
        let items: Vec<(Array1<f64>, Distribution)> = (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                (random_unit(&mut rng, 2), softmax(&logits))
            })
            .collect();
        set.update(items).unwrap();
        let before: Vec<Vec<f64>> = (0..3).map(|c| set.class(c).iter().map(|e| e.entropy).collect()).collect();
        set.filter_by_entropy(Some(cap));
        for c in 0..3 {
            let kept = set.class(c);
            prop_assert!(kept.len() <= cap);
            prop_assert!(kept.windows(2).all(|w| w[0].seq < w[1].seq));
            let mut sorted = before[c].clone();
            sorted.sort_by(f64::total_cmp);
            let mut kept_h: Vec<f64> = kept.iter().map(|e| e.entropy).collect();
            kept_h.sort_by(f64::total_cmp);
            prop_assert_eq!(kept_h, sorted[..sorted.len().min(cap)].to_vec());
        }
    }

    #[test]
    fn engine_distributions_are_normalized(seed in 0u64..1000, n_s in 1usize..5, m in prop_oneof![Just(-1i64), 1i64..6]) {
        let h = head(seed, 3, 6);
        let cfg = TastConfig { n_e: 3, n_s, m, seed, ..TastConfig::default() };
        let mut engine = TastEngine::new(h, cfg).unwrap();
        for batch in unit_rows(seed, 40, 6).chunks(8) {
            let out = engine.adapt_batch(batch).unwrap();
            for d in &out.distributions {
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(d.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            for (p, d) in out.predictions.iter().zip(&out.distributions) {
                prop_assert_eq!(*p, d.argmax());
            }
        }
    }

    #[test]
    fn support_entropies_match_head(seed in 0u64..1000) {
        let h = head(seed, 4, 5);
        let mut engine = PrototypeEngine::new(h.clone(), -1).unwrap();
        let rows = unit_rows(seed + 1, 16, 5);
        engine.t3a_batch(&rows).unwrap();
        for (_, e) in engine.support.entries().filter(|(_, e)| e.seq >= 4) {
            let p = h.probs(e.key.view()).unwrap();
            prop_assert_eq!(e.class, p.argmax());
            prop_assert!((e.entropy - shannon_entropy(&p)).abs() < 1e-12);
        }
    }
}

#[test]
fn tast_n_matches_single_identity_member() {
    // one member whose weight is the identity leaves feature space unchanged
    let h = head(4, 3, 4);
    let mut adapter = EnsembleAdapter::new(4, 4, 1, RngSeed(0)).unwrap().with_unit_factors();
    adapter.shared = Array2::eye(4);
    let cfg = TastConfig { n_e: 1, steps: 0, n_s: 2, d_phi: Some(4), ..TastConfig::default() };
    let mut engine = TastEngine::with_adapter(h.clone(), cfg, adapter).unwrap();
    let mut baseline = PrototypeEngine::new(h, 100).unwrap();
    for batch in unit_rows(9, 64, 4).chunks(16) {
        let out = engine.adapt_batch(batch).unwrap();
        let base = baseline.tast_n_batch(batch, 2, 0.1).unwrap();
        for (f, (got, (k, p))) in batch.iter().zip(out.distributions.iter().zip(&base)) {
            assert_eq!(got.argmax(), *k);
            for (a, b) in got.probs().iter().zip(p.probs()) {
                assert!((a - b).abs() < 1e-12);
            }
            let (k2, _) = tast_n_predict(&baseline.support, f, 2, 0.1).unwrap();
            assert_eq!(k2, *k);
        }
    }
}

fn head_model_and_stream(seed: u64) -> (SourceModel, tast_core::bench::Dataset) {
    let spec = SyntheticSpec::new(3, 8, 300, 240, 0.8, Shift::MeanShift { scale: 1.0 }, seed).unwrap();
    let (train, test) = generate(&spec).unwrap();
    let head = train_source_head(&train, &TrainOptions::head_default()).unwrap().model;
    (SourceModel::Head { head }, test)
}

#[test]
fn runs_are_deterministic() {
    let (model, test) = head_model_and_stream(2);
    for method in [Method::T3a, Method::Tast, Method::TastN, Method::TentClf, Method::PlClf] {
        let config = RunConfig { n_e: 4, ..RunConfig::new(method) };
        let a = run_online(&model, &test, &config).unwrap();
        let b = run_online(&model, &test, &config).unwrap();
        assert_eq!(a.predictions, b.predictions, "{method}");
        let strip = |r: &tast_core::bench::RunRecord| -> Vec<(usize, f64, Option<f64>)> {
            r.batches.iter().map(|b| (b.batch_index, b.cumulative_accuracy, b.mean_loss)).collect()
        };
        assert_eq!(strip(&a), strip(&b), "{method}");
    }
}

#[test]
fn predictions_ignore_future_batches() {
    // the first half of a stream is processed identically whatever follows it
    let (model, test) = head_model_and_stream(6);
    let half = 128;
    let mut tail_swapped = test.clone();
    tail_swapped.inputs[half..].reverse();
    tail_swapped.labels[half..].reverse();
    for method in [Method::Tast, Method::TastN, Method::PlClf] {
        let config = RunConfig { n_e: 4, ..RunConfig::new(method) };
        let a = run_online(&model, &test, &config).unwrap();
        let b = run_online(&model, &tail_swapped, &config).unwrap();
        assert_eq!(a.predictions[..half], b.predictions[..half], "{method}");
    }
}

#[test]
fn labels_do_not_reach_the_engine() {
    let (model, test) = head_model_and_stream(8);
    let mut relabeled = test.clone();
    for y in &mut relabeled.labels {
        *y = (*y + 1) % 3;
    }
    let config = RunConfig { n_e: 4, ..RunConfig::new(Method::Tast) };
    let a = run_online(&model, &test, &config).unwrap();
    let b = run_online(&model, &relabeled, &config).unwrap();
    assert_eq!(a.predictions, b.predictions);
}
