//! Synthetic domain-shift benchmark: Gaussian blobs, a shifted test stream,
//! source-model training, the online evaluation loop and the grid runner.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::mathcore::{adam_step, kaiming_normal, norm, AdamState, RngSeed, NORM_EPS};
use crate::tast::{HeadTuner, PrototypeEngine, TastConfig, TastEngine, PL_THRESHOLD};
use crate::tastbn::{BnStats, TastBnConfig, TastBnEngine, ToyBNExtractor, BN_EPS};

pub const DEFAULT_CLASSES: usize = 5;
pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_TRAIN_PER_CLASS: usize = 200;
pub const DEFAULT_TEST: usize = 2000;
pub const DEFAULT_COV_SCALE: f64 = 1.25;
pub const DEFAULT_SHIFT_SCALE: f64 = 1.5;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    Identity,
    /// Translates every test point by a fixed random direction of length
    /// `scale * class_cov_scale * sqrt(d)`.
    MeanShift { scale: f64 },
    /// Rotates each coordinate pair `(0,1), (2,3), ...` by `degrees`.
    Rotation { degrees: f64 },
    /// Adds isotropic noise with standard deviation `sigma`.
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub class_means: Array2<f64>,
    /// Per-coordinate standard deviation of each blob.
    pub class_cov_scale: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Draws class means with standard normal coordinates.
    pub fn new(
        num_classes: usize,
        dim: usize,
        n_train: usize,
        n_test: usize,
        class_cov_scale: f64,
        shift: Shift,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngSeed(seed).derive(0).rng();
        let class_means = Array2::from_shape_simple_fn((num_classes, dim), || rng.sample(StandardNormal));
        let spec = Self {
            num_classes,
            dim,
            n_train,
            n_test,
            class_means,
            class_cov_scale,
            shift,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// K=5, d=16, 200 training points per class, 2000 test points.
    pub fn default_with(shift: Shift, seed: u64) -> Result<Self> {
        Self::new(
            DEFAULT_CLASSES,
            DEFAULT_DIM,
            DEFAULT_CLASSES * DEFAULT_TRAIN_PER_CLASS,
            DEFAULT_TEST,
            DEFAULT_COV_SCALE,
            shift,
            seed,
        )
    }

    pub fn default_mean_shift(seed: u64) -> Result<Self> {
        Self::default_with(Shift::MeanShift { scale: DEFAULT_SHIFT_SCALE }, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 {
            return Err(Error::InvalidConfig("need at least 2 classes and 1 dimension".into()));
        }
        if self.class_means.dim() != (self.num_classes, self.dim) {
            return Err(Error::ShapeMismatch {
                expected: self.num_classes * self.dim,
                actual: self.class_means.len(),
            });
        }
        let min_n = self.num_classes * 10;
        if self.n_train < min_n || self.n_test < min_n {
            return Err(Error::InvalidConfig(format!(
                "train and test sizes must be at least {min_n}"
            )));
        }
        if self.class_cov_scale.is_nan() || self.class_cov_scale < 0.0 {
            return Err(Error::InvalidConfig("class_cov_scale must be non-negative".into()));
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.class_means.row(a) == self.class_means.row(b) {
                    return Err(Error::InvalidConfig(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        Ok(())
    }
}

/// Labeled points. Labels are read only by the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Array1<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Array1<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::ShapeMismatch { expected: inputs.len(), actual: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::IndexOutOfRange { index: bad, len: num_classes });
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Array1::len)
    }

    /// Inputs scaled to unit norm.
    pub fn normalized_inputs(&self) -> Result<Vec<Array1<f64>>> {
        self.inputs
            .iter()
            .map(|x| {
                let n = norm(x.view());
                if n < NORM_EPS {
                    Err(Error::ZeroNormVector)
                } else {
                    Ok(x / n)
                }
            })
            .collect()
    }

    /// Shuffles and splits off the last `fraction` as a held-out part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut RngSeed(seed).derive(7).rng());
        let n_held = ((self.len() as f64) * fraction).round() as usize;
        let (keep, held) = order.split_at(self.len() - n_held);
        let take = |idx: &[usize]| {
            Dataset::new(
                idx.iter().map(|&i| self.inputs[i].clone()).collect(),
                idx.iter().map(|&i| self.labels[i]).collect(),
                self.num_classes,
            )
        };
        Ok((take(keep)?, take(held)?))
    }
}

fn sample_blobs(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, spec.class_cov_scale).expect("finite scale");
    let inputs = labels
        .iter()
        .map(|&y| {
            let mut x = spec.class_means.row(y).to_owned();
            x.mapv_inplace(|m| m + noise.sample(rng));
            x
        })
        .collect();
    Dataset {
        inputs,
        labels,
        num_classes: spec.num_classes,
    }
}

fn apply_shift(spec: &SyntheticSpec, data: &mut Dataset, rng: &mut ChaCha8Rng) {
    match spec.shift {
        Shift::Identity => {}
        Shift::MeanShift { scale } => {
            let mut dir = Array1::from_shape_simple_fn(spec.dim, || rng.sample::<f64, _>(StandardNormal));
            dir /= norm(dir.view());
            let delta = dir * (scale * spec.class_cov_scale * (spec.dim as f64).sqrt());
            for x in &mut data.inputs {
                *x += &delta;
            }
        }
        Shift::Rotation { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            for x in &mut data.inputs {
                for p in (0..spec.dim / 2).map(|i| 2 * i) {
                    let (a, b) = (x[p], x[p + 1]);
                    x[p] = c * a - s * b;
                    x[p + 1] = s * a + c * b;
                }
            }
        }
        Shift::GaussianNoise { sigma } => {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for x in &mut data.inputs {
                x.mapv_inplace(|v| v + noise.sample(rng));
            }
        }
    }
}

/// Draws a labeled source training set and a shifted test stream.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let seed = RngSeed(spec.seed);
    let train = sample_blobs(spec, spec.n_train, &mut seed.derive(1).rng());
    let mut test = sample_blobs(spec, spec.n_test, &mut seed.derive(2).rng());
    apply_shift(spec, &mut test, &mut seed.derive(3).rng());
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainOptions {
    /// Full-batch gradient descent settings for the linear head.
    pub fn head_default() -> Self {
        Self { epochs: 300, lr: 2.0, seed: 0 }
    }

    /// Minibatch Adam settings for the batch-normalized network.
    pub fn bn_default() -> Self {
        Self { epochs: 40, lr: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<M> {
    pub model: M,
    pub train_accuracy: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl<M> TrainReport<M> {
    pub fn converged(&self) -> bool {
        self.final_loss.is_finite() && self.final_loss < self.initial_loss
    }
}

fn check_training_labels(train: &Dataset) -> Result<()> {
    if train.num_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    let first = train.labels.first().ok_or(Error::EmptyBatch)?;
    if train.labels.iter().all(|y| y == first) {
        return Err(Error::InvalidConfig("training labels cover a single class".into()));
    }
    Ok(())
}

fn head_loss_and_grad(head: &LinearHead, feats: &[Array1<f64>], labels: &[usize]) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let scale = 1.0 / feats.len() as f64;
    let mut loss = 0.0;
    let mut g_w = Array2::zeros(head.weight.dim());
    let mut g_b = Array1::zeros(head.num_classes());
    for (f, &y) in feats.iter().zip(labels) {
        let p = head.probs(f.view())?;
        loss -= scale * p.probs()[y].max(crate::mathcore::LOG_CLAMP).ln();
        let mut g = Array1::from_vec(p.into_vec()) * scale;
        g[y] -= scale;
        for (k, mut row) in g_w.rows_mut().into_iter().enumerate() {
            row.scaled_add(g[k], f);
        }
        g_b += &g;
    }
    Ok((loss, g_w, g_b))
}

fn accuracy(pred: impl IntoIterator<Item = usize>, labels: &[usize]) -> f64 {
    let hits = pred.into_iter().zip(labels).filter(|(p, y)| p == *y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Multinomial logistic regression on unit-norm inputs, trained with
/// full-batch gradient descent from a small seeded initialization.
pub fn train_source_head(train: &Dataset, opts: &TrainOptions) -> Result<TrainReport<LinearHead>> {
    check_training_labels(train)?;
    let feats = train.normalized_inputs()?;
    let mut rng = RngSeed(opts.seed).derive(11).rng();
    let weight = kaiming_normal(train.num_classes, train.dim(), &mut rng) * 0.01;
    let mut head = LinearHead::new(weight, Array1::zeros(train.num_classes))?;
    let (initial_loss, _, _) = head_loss_and_grad(&head, &feats, &train.labels)?;
    for _ in 0..opts.epochs {
        let (_, g_w, g_b) = head_loss_and_grad(&head, &feats, &train.labels)?;
        head.weight.scaled_add(-opts.lr, &g_w);
        head.bias.scaled_add(-opts.lr, &g_b);
    }
    let (final_loss, _, _) = head_loss_and_grad(&head, &feats, &train.labels)?;
    let preds = feats.iter().map(|f| head.predict(f.view())).collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        train_accuracy: accuracy(preds, &train.labels),
        model: head,
        initial_loss,
        final_loss,
    })
}

/// Every trainable tensor of the batch-normalized network and its head.
#[derive(Debug, Clone, PartialEq)]
pub struct BnNetwork {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl BnNetwork {
    pub fn init(d_in: usize, hidden: usize, d_z: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: kaiming_normal(hidden, d_in, rng),
            b1: Array1::zeros(hidden),
            gamma: Array1::ones(hidden),
            beta: Array1::zeros(hidden),
            w2: kaiming_normal(d_z, hidden, rng),
            b2: Array1::zeros(d_z),
            head_w: kaiming_normal(k, d_z, rng),
            head_b: Array1::zeros(k),
        }
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.gamma.as_slice_mut().expect("contiguous"),
            self.beta.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("contiguous"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("contiguous"),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
            head_w: Array2::zeros(self.head_w.dim()),
            head_b: Array1::zeros(self.head_b.len()),
        }
    }

    fn extractor(&self) -> Result<ToyBNExtractor> {
        let mut e = ToyBNExtractor::new(self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone())?;
        e.gamma = self.gamma.clone();
        e.beta = self.beta.clone();
        Ok(e)
    }

    /// Mean cross-entropy over a minibatch normalized with its own
    /// statistics, and the gradient of every tensor.
    pub fn loss_and_gradients(&self, xs: &[Array1<f64>], labels: &[usize]) -> Result<(f64, BnNetwork)> {
        let e = self.extractor()?;
        let stats = e.batch_stats(xs)?;
        let head = LinearHead::new(self.head_w.clone(), self.head_b.clone())?;
        let n = xs.len() as f64;
        let std = stats.var.mapv(|v| (v + BN_EPS).sqrt());
        let mut g = self.zeros_like();
        let mut loss = 0.0;
        let mut xhats = Vec::with_capacity(xs.len());
        let mut g_xhats = Vec::with_capacity(xs.len());
        for (x, &y) in xs.iter().zip(labels) {
            let xhat = e.normalized_activations(x, &stats)?;
            let a = &self.gamma * &xhat + &self.beta;
            let r = a.mapv(|v| v.max(0.0));
            let out = self.w2.dot(&r) + &self.b2;
            let out_norm = norm(out.view());
            if out_norm < NORM_EPS {
                return Err(Error::ZeroNormVector);
            }
            let u = &out / out_norm;
            let p = head.probs(u.view())?;
            loss -= p.probs()[y].max(crate::mathcore::LOG_CLAMP).ln() / n;

            let mut g_l = Array1::from_vec(p.into_vec()) / n;
            g_l[y] -= 1.0 / n;
            for (k, mut row) in g.head_w.rows_mut().into_iter().enumerate() {
                row.scaled_add(g_l[k], &u);
            }
            g.head_b += &g_l;
            let g_u = self.head_w.t().dot(&g_l);
            let g_out = (&g_u - &(g_u.dot(&u) * &u)) / out_norm;
            for (i, mut row) in g.w2.rows_mut().into_iter().enumerate() {
                row.scaled_add(g_out[i], &r);
            }
            g.b2 += &g_out;
            let mut g_a = self.w2.t().dot(&g_out);
            g_a.zip_mut_with(&a, |ga, &av| {
                if av <= 0.0 {
                    *ga = 0.0
                }
            });
            g.gamma += &(&g_a * &xhat);
            g.beta += &g_a;
            g_xhats.push(&g_a * &self.gamma);
            xhats.push(xhat);
        }
        // batch-statistics backward, per hidden unit
        let mut mean_g = Array1::<f64>::zeros(self.gamma.len());
        let mut mean_gx = Array1::<f64>::zeros(self.gamma.len());
        for (gx, xh) in g_xhats.iter().zip(&xhats) {
            mean_g += gx;
            mean_gx += &(gx * xh);
        }
        mean_g /= n;
        mean_gx /= n;
        for ((gx, xh), x) in g_xhats.iter().zip(&xhats).zip(xs) {
            let g_pre = (gx - &mean_g - &(xh * &mean_gx)) / &std;
            for (i, mut row) in g.w1.rows_mut().into_iter().enumerate() {
                row.scaled_add(g_pre[i], x);
            }
            g.b1 += &g_pre;
        }
        Ok((loss, g))
    }
}

pub const BN_HIDDEN: usize = 32;
const BN_TRAIN_BATCH: usize = 64;

fn full_stats(e: &ToyBNExtractor, xs: &[Array1<f64>]) -> Result<BnStats> {
    e.batch_stats(xs)
}

/// Trains `Linear -> BN -> ReLU -> Linear` plus a linear head on the
/// unit-norm output with minibatch Adam. The returned extractor carries the
/// training-set statistics as its source statistics.
pub fn train_source_bn(train: &Dataset, opts: &TrainOptions) -> Result<TrainReport<(ToyBNExtractor, LinearHead)>> {
    check_training_labels(train)?;
    let d = train.dim();
    let mut rng = RngSeed(opts.seed).derive(13).rng();
    let mut net = BnNetwork::init(d, BN_HIDDEN, d, train.num_classes, &mut rng);
    let mut states: Vec<AdamState> = net.tensors_mut().iter().map(|t| AdamState::new(t.len())).collect();

    let eval = |net: &BnNetwork| -> Result<(f64, f64)> {
        let e = net.extractor()?;
        let mut e = e;
        e.source_stats = full_stats(&e, &train.inputs)?;
        let head = LinearHead::new(net.head_w.clone(), net.head_b.clone())?;
        let emb = e.source_forward(&train.inputs)?;
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(emb.len());
        for (u, &y) in emb.iter().zip(&train.labels) {
            let p = head.probs(u.view())?;
            loss -= p.probs()[y].max(crate::mathcore::LOG_CLAMP).ln();
            preds.push(p.argmax());
        }
        Ok((loss / emb.len() as f64, accuracy(preds, &train.labels)))
    };
    let (initial_loss, _) = eval(&net)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BN_TRAIN_BATCH) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<Array1<f64>> = chunk.iter().map(|&i| train.inputs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (_, mut g) = net.loss_and_gradients(&xs, &ys)?;
            for ((p, gr), st) in net.tensors_mut().into_iter().zip(g.tensors_mut()).zip(&mut states) {
                adam_step(p, gr, st, opts.lr)?;
            }
        }
    }
    let (final_loss, train_accuracy) = eval(&net)?;
    let mut extractor = net.extractor()?;
    extractor.source_stats = full_stats(&extractor, &train.inputs)?;
    extractor.reset_optimizer();
    let head = LinearHead::new(net.head_w, net.head_b)?;
    Ok(TrainReport {
        model: (extractor, head),
        train_accuracy,
        initial_loss,
        final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "t3a")]
    T3a,
    #[serde(rename = "tast")]
    Tast,
    #[serde(rename = "tast_n")]
    TastN,
    #[serde(rename = "tast_bn")]
    TastBn,
    #[serde(rename = "tentclf")]
    TentClf,
    #[serde(rename = "plclf")]
    PlClf,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::T3a,
        Method::Tast,
        Method::TastN,
        Method::TastBn,
        Method::TentClf,
        Method::PlClf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::T3a => "t3a",
            Method::Tast => "tast",
            Method::TastN => "tast_n",
            Method::TastBn => "tast_bn",
            Method::TentClf => "tentclf",
            Method::PlClf => "plclf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// A source model: a linear head over fixed features, or the toy
/// batch-normalized network with its head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceModel {
    Head { head: LinearHead },
    Bn { extractor: ToyBNExtractor, head: LinearHead },
}

impl SourceModel {
    pub fn head(&self) -> &LinearHead {
        match self {
            SourceModel::Head { head } | SourceModel::Bn { head, .. } => head,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SourceModel::Head { head } => head.dim(),
            SourceModel::Bn { extractor, .. } => extractor.d_in(),
        }
    }

    /// Unadapted predictions (the BN network uses its source statistics).
    pub fn predict(&self, inputs: &[Array1<f64>]) -> Result<Vec<usize>> {
        match self {
            SourceModel::Head { head } => normalize_rows(inputs)?
                .iter()
                .map(|f| head.predict(f.view()))
                .collect(),
            SourceModel::Bn { extractor, head } => extractor
                .source_forward(inputs)?
                .iter()
                .map(|u| head.predict(u.view()))
                .collect(),
        }
    }
}

fn normalize_rows(rows: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    rows.iter()
        .map(|x| {
            let n = norm(x.view());
            if n < NORM_EPS {
                Err(Error::ZeroNormVector)
            } else {
                Ok(x / n)
            }
        })
        .collect()
}

/// Everything needed to reproduce one online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub n_e: usize,
    pub n_s: usize,
    pub steps: usize,
    pub m: i64,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub d_phi: Option<usize>,
    pub batch_size: usize,
    pub global_cap: Option<usize>,
    pub fixed_prototypes: bool,
}

impl RunConfig {
    pub fn new(method: Method) -> Self {
        let t = TastConfig::default();
        let b = TastBnConfig::default();
        Self {
            method,
            n_e: t.n_e,
            n_s: t.n_s,
            steps: t.steps,
            m: t.m,
            tau: t.tau,
            lr: t.lr,
            seed: t.seed,
            d_phi: t.d_phi,
            batch_size: DEFAULT_BATCH_SIZE,
            global_cap: b.global_cap,
            fixed_prototypes: b.fixed_prototypes,
        }
    }

    pub fn tast_config(&self) -> TastConfig {
        TastConfig {
            n_e: self.n_e,
            n_s: self.n_s,
            steps: self.steps,
            m: self.m,
            tau: self.tau,
            lr: self.lr,
            seed: self.seed,
            d_phi: self.d_phi,
        }
    }

    pub fn tast_bn_config(&self) -> TastBnConfig {
        TastBnConfig {
            n_s: self.n_s,
            steps: self.steps,
            m: self.m,
            tau: self.tau,
            lr: self.lr,
            global_cap: self.global_cap,
            fixed_prototypes: self.fixed_prototypes,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        self.tast_config().validate()?;
        self.tast_bn_config().validate()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(Method::Tast)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub size: usize,
    pub batch_accuracy: f64,
    pub cumulative_accuracy: f64,
    pub mean_loss: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config: RunConfig,
    pub batches: Vec<BatchRecord>,
    pub predictions: Vec<usize>,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> f64 {
        self.batches.last().map_or(0.0, |b| b.cumulative_accuracy)
    }

    pub fn wall_ms(&self) -> f64 {
        self.batches.iter().map(|b| b.wall_ms).sum()
    }
}

/// Consecutive batch ranges. A trailing batch of one row is folded into
/// the previous batch when `min_batch` is 2.
pub fn batch_ranges(n: usize, batch_size: usize, min_batch: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < min_batch) {
        let last = out.pop().expect("at least two ranges");
        out.last_mut().expect("at least one range").end = last.end;
    }
    out
}

enum Online {
    Frozen(SourceModel),
    Prototype { engine: PrototypeEngine, t3a: bool, n_s: usize, tau: f64 },
    Tast(Box<TastEngine>),
    TastBn(Box<TastBnEngine>),
    Tuner { tuner: HeadTuner, lr: f64, entropy: bool },
}

impl Online {
    fn build(model: &SourceModel, config: &RunConfig) -> Result<Self> {
        let head_only = || -> Result<LinearHead> {
            match model {
                SourceModel::Head { head } => Ok(head.clone()),
                SourceModel::Bn { .. } => Err(Error::InvalidConfig(format!(
                    "method {} needs a feature-level head model",
                    config.method
                ))),
            }
        };
        Ok(match config.method {
            Method::None => Online::Frozen(model.clone()),
            Method::T3a | Method::TastN => Online::Prototype {
                engine: PrototypeEngine::new(head_only()?, config.m)?,
                t3a: config.method == Method::T3a,
                n_s: config.n_s,
                tau: config.tau,
            },
            Method::Tast => Online::Tast(Box::new(TastEngine::new(head_only()?, config.tast_config())?)),
            Method::TastBn => match model {
                SourceModel::Bn { extractor, head } => Online::TastBn(Box::new(TastBnEngine::new(
                    extractor.clone(),
                    head.clone(),
                    config.tast_bn_config(),
                )?)),
                SourceModel::Head { .. } => {
                    return Err(Error::InvalidConfig("tast_bn needs a batch-normalized model".into()))
                }
            },
            Method::TentClf | Method::PlClf => Online::Tuner {
                tuner: HeadTuner::new(head_only()?),
                lr: config.lr,
                entropy: config.method == Method::TentClf,
            },
        })
    }

    fn min_batch(&self) -> usize {
        match self {
            Online::TastBn(_) => 2,
            _ => 1,
        }
    }

    /// Predictions for the batch, emitted before any label is seen.
    fn process(&mut self, raw: &[Array1<f64>]) -> Result<(Vec<usize>, Option<f64>)> {
        match self {
            Online::Frozen(model) => Ok((model.predict(raw)?, None)),
            Online::Prototype { engine, t3a, n_s, tau } => {
                let feats = normalize_rows(raw)?;
                if *t3a {
                    Ok((engine.t3a_batch(&feats)?, None))
                } else {
                    let out = engine.tast_n_batch(&feats, *n_s, *tau)?;
                    Ok((out.into_iter().map(|(k, _)| k).collect(), None))
                }
            }
            Online::Tast(engine) => {
                let out = engine.adapt_batch(&normalize_rows(raw)?)?;
                Ok((out.predictions, out.mean_loss))
            }
            Online::TastBn(engine) => {
                let out = engine.adapt_batch(raw)?;
                Ok((out.predictions, out.mean_loss))
            }
            Online::Tuner { tuner, lr, entropy } => {
                let feats = normalize_rows(raw)?;
                let preds = tuner.predict(&feats)?;
                let loss = if *entropy {
                    Some(tuner.tentclf_step(&feats, *lr)?)
                } else {
                    tuner.plclf_step(&feats, *lr, PL_THRESHOLD)?
                };
                Ok((preds, loss))
            }
        }
    }
}

/// Tallies predictions against the held-out labels.
struct Scorer<'a> {
    labels: &'a [usize],
    hits: usize,
    seen: usize,
}

impl Scorer<'_> {
    fn score(&mut self, range: Range<usize>, preds: &[usize]) -> (f64, f64) {
        let hits = preds.iter().zip(&self.labels[range]).filter(|(p, y)| p == y).count();
        self.hits += hits;
        self.seen += preds.len();
        (hits as f64 / preds.len() as f64, self.hits as f64 / self.seen as f64)
    }
}

/// Processes the stream once, in order, scoring each batch only after its
/// predictions are emitted.
pub fn run_online(model: &SourceModel, test: &Dataset, config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if test.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), actual: test.dim() });
    }
    let mut online = Online::build(model, config)?;
    let mut scorer = Scorer { labels: &test.labels, hits: 0, seen: 0 };
    let mut batches = Vec::new();
    let mut predictions = Vec::with_capacity(test.len());
    for (batch_index, range) in batch_ranges(test.len(), config.batch_size, online.min_batch())
        .into_iter()
        .enumerate()
    {
        let start = Instant::now();
        let (preds, mean_loss) = online.process(&test.inputs[range.clone()])?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if preds.len() != range.len() {
            return Err(Error::ShapeMismatch { expected: range.len(), actual: preds.len() });
        }
        let (batch_accuracy, cumulative_accuracy) = scorer.score(range.clone(), &preds);
        batches.push(BatchRecord {
            batch_index,
            size: range.len(),
            batch_accuracy,
            cumulative_accuracy,
            mean_loss,
            wall_ms,
        });
        predictions.extend(preds);
    }
    Ok(RunRecord {
        method: config.method,
        config: config.clone(),
        batches,
        predictions,
    })
}

pub const GRID_N_S: [usize; 4] = [1, 2, 4, 8];
pub const GRID_STEPS: [usize; 2] = [1, 3];
pub const GRID_M: [i64; 6] = [1, 5, 20, 50, 100, -1];

/// The 48-point grid over `N_s`, `T` and `M`, in that nesting order, with
/// every other field taken from `base`.
pub fn default_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = Vec::with_capacity(GRID_N_S.len() * GRID_STEPS.len() * GRID_M.len());
    for n_s in GRID_N_S {
        for steps in GRID_STEPS {
            for m in GRID_M {
                grid.push(RunConfig { n_s, steps, m, ..base.clone() });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_index: usize,
    pub best: RunConfig,
    pub best_accuracy: f64,
    /// Validation accuracy of every grid point, in grid order.
    pub accuracies: Vec<f64>,
}

/// Worker count for the grid: `TAFS_THREADS`, or all cores when unset or 0.
pub fn grid_threads() -> usize {
    std::env::var("TAFS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates every config on the labeled validation stream and returns the
/// most accurate one; ties go to the earliest grid position.
pub fn grid_search(model: &SourceModel, validation: &Dataset, grid: &[RunConfig]) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid_threads())
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let accuracies: Vec<f64> = pool.install(|| {
        grid.par_iter()
            .map(|c| run_online(model, validation, c).map(|r| r.final_accuracy()))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut best_index = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best_index] {
            best_index = i;
        }
    }
    Ok(GridResult {
        best_index,
        best: grid[best_index].clone(),
        best_accuracy: accuracies[best_index],
        accuracies,
    })
}

/// Unadapted accuracy of a model on a labeled set.
pub fn source_accuracy(model: &SourceModel, data: &Dataset) -> Result<f64> {
    Ok(accuracy(model.predict(&data.inputs)?, &data.labels))
}
