//! Adaptation of the batch-normalization affine parameters of a small
//! feature extractor, `Linear -> BN -> ReLU -> Linear`, with the support set
//! holding raw inputs.
//!
//! Batch statistics always come from the current test batch. Support rows
//! are pushed through the same normalization, so one set of statistics
//! covers the whole step. Since the first layer is frozen those statistics
//! do not depend on `gamma` or `beta`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapter::{proto_cross_entropy_backward, proto_distribution, Prototypes};
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::mathcore::{adam_step, norm, AdamState, Distribution, NORM_EPS};
use crate::supportset::{EntryId, NeighborList, SupportMode, SupportSet};
use crate::tast::{class_cap, mean_distribution, vote_distribution, BatchOutcome};

pub const BN_EPS: f64 = 1e-5;

/// Per-unit mean and variance used to normalize the hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBNExtractor {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Running statistics accumulated during source training.
    pub source_stats: BnStats,
    adam_gamma: AdamState,
    adam_beta: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGradients {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Intermediate values of one row's forward pass.
struct Trace {
    xhat: Array1<f64>,
    pre_relu: Array1<f64>,
    y: Array1<f64>,
    y_norm: f64,
}

impl ToyBNExtractor {
    /// Identity affine parameters and unit source statistics.
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        let h = w1.nrows();
        if h < 2 {
            return Err(Error::InvalidConfig(format!("hidden width must be at least 2, got {h}")));
        }
        if b1.len() != h {
            return Err(Error::DimensionMismatch { expected: h, actual: b1.len() });
        }
        if w2.ncols() != h {
            return Err(Error::DimensionMismatch { expected: h, actual: w2.ncols() });
        }
        if b2.len() != w2.nrows() {
            return Err(Error::DimensionMismatch { expected: w2.nrows(), actual: b2.len() });
        }
        Ok(Self {
            w1,
            b1,
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            w2,
            b2,
            source_stats: BnStats {
                mean: Array1::zeros(h),
                var: Array1::ones(h),
            },
            adam_gamma: AdamState::new(h),
            adam_beta: AdamState::new(h),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_z(&self) -> usize {
        self.w2.nrows()
    }

    /// Clears the optimizer state, e.g. after source training.
    pub fn reset_optimizer(&mut self) {
        self.adam_gamma = AdamState::new(self.hidden());
        self.adam_beta = AdamState::new(self.hidden());
    }

    fn check_row(&self, x: &Array1<f64>) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch { expected: self.d_in(), actual: x.len() });
        }
        Ok(())
    }

    pub fn pre_activations(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_row(x)?;
        Ok(self.w1.dot(x) + &self.b1)
    }

    /// Mean and biased variance of the hidden pre-activations over `batch`.
    pub fn batch_stats(&self, batch: &[Array1<f64>]) -> Result<BnStats> {
        if batch.len() < 2 {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        let pre = batch
            .iter()
            .map(|x| self.pre_activations(x))
            .collect::<Result<Vec<_>>>()?;
        let n = pre.len() as f64;
        let mut mean = Array1::<f64>::zeros(self.hidden());
        for p in &pre {
            mean += p;
        }
        mean /= n;
        let mut var = Array1::<f64>::zeros(self.hidden());
        for p in &pre {
            let d = p - &mean;
            var += &(&d * &d);
        }
        var /= n;
        Ok(BnStats { mean, var })
    }

    pub fn normalized_activations(&self, x: &Array1<f64>, stats: &BnStats) -> Result<Array1<f64>> {
        let pre = self.pre_activations(x)?;
        Ok((pre - &stats.mean) / stats.var.mapv(|v| (v + BN_EPS).sqrt()))
    }

    fn trace(&self, x: &Array1<f64>, stats: &BnStats) -> Result<Trace> {
        let xhat = self.normalized_activations(x, stats)?;
        let pre_relu = &self.gamma * &xhat + &self.beta;
        let y = self.w2.dot(&pre_relu.mapv(|a| a.max(0.0))) + &self.b2;
        let y_norm = norm(y.view());
        if y_norm < NORM_EPS {
            return Err(Error::ZeroNormVector);
        }
        Ok(Trace { xhat, pre_relu, y, y_norm })
    }

    /// Unit-norm embeddings of `rows` under the given statistics.
    pub fn embed(&self, rows: &[Array1<f64>], stats: &BnStats) -> Result<Vec<Array1<f64>>> {
        rows.iter()
            .map(|x| self.trace(x, stats).map(|t| t.y / t.y_norm))
            .collect()
    }

    /// Embeds a batch using its own statistics.
    pub fn bn_forward(&self, batch: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        let stats = self.batch_stats(batch)?;
        self.embed(batch, &stats)
    }

    /// Embeds rows with the source running statistics (no adaptation).
    pub fn source_forward(&self, rows: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        self.embed(rows, &self.source_stats)
    }

    /// Adds `g_u`, the gradient with respect to a row's unit-norm
    /// embedding, into the affine-parameter gradients.
    fn backward_row(&self, t: &Trace, g_u: &Array1<f64>, out: &mut BnGradients) {
        let u = &t.y / t.y_norm;
        let radial = g_u.dot(&u);
        let g_y = (g_u - &(radial * &u)) / t.y_norm;
        let g_hidden = self.w2.t().dot(&g_y);
        for j in 0..self.hidden() {
            if t.pre_relu[j] > 0.0 {
                out.gamma[j] += g_hidden[j] * t.xhat[j];
                out.beta[j] += g_hidden[j];
            }
        }
    }

    /// Mean cross-entropy of the batch's prototype distributions against
    /// `targets`, and its gradient with respect to `gamma` and `beta`.
    ///
    /// Prototypes are the class means of the support embeddings unless
    /// `fixed` is given, in which case they are constants.
    pub fn loss_and_gradients(
        &self,
        batch: &[Array1<f64>],
        support: &SupportSet,
        targets: &[Distribution],
        tau: f64,
        fixed: Option<&Prototypes>,
    ) -> Result<(f64, BnGradients)> {
        let stats = self.batch_stats(batch)?;
        let traces = batch
            .iter()
            .map(|x| self.trace(x, &stats))
            .collect::<Result<Vec<_>>>()?;
        let queries: Vec<Array1<f64>> = traces.iter().map(|t| &t.y / t.y_norm).collect();

        let mut support_traces: Vec<Vec<Trace>> = Vec::new();
        let owned;
        let protos = match fixed {
            Some(p) => p,
            None => {
                support_traces = (0..support.num_classes())
                    .map(|k| {
                        support
                            .class(k)
                            .iter()
                            .map(|e| self.trace(&e.key, &stats))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                owned = class_mean_embeddings(&support_traces);
                &owned
            }
        };
        if let Some(bad) = targets.iter().find(|t| t.len() != protos.num_classes()) {
            return Err(Error::DimensionMismatch {
                expected: protos.num_classes(),
                actual: bad.len(),
            });
        }

        let ce = proto_cross_entropy_backward(&queries, targets, protos, tau)?;
        let mut grads = BnGradients {
            gamma: Array1::zeros(self.hidden()),
            beta: Array1::zeros(self.hidden()),
        };
        for (t, g) in traces.iter().zip(&ce.g_queries) {
            self.backward_row(t, g, &mut grads);
        }
        for (rows, g) in support_traces.iter().zip(&ce.g_protos) {
            if let Some(g) = g {
                let share = g / rows.len() as f64;
                for t in rows {
                    self.backward_row(t, &share, &mut grads);
                }
            }
        }
        Ok((ce.loss, grads))
    }

    pub fn apply_update(&mut self, grads: &BnGradients, lr: f64) -> Result<()> {
        adam_step(
            self.gamma.as_slice_mut().expect("contiguous"),
            grads.gamma.as_slice().expect("contiguous"),
            &mut self.adam_gamma,
            lr,
        )?;
        adam_step(
            self.beta.as_slice_mut().expect("contiguous"),
            grads.beta.as_slice().expect("contiguous"),
            &mut self.adam_beta,
            lr,
        )
    }
}

fn class_mean_embeddings(traces: &[Vec<Trace>]) -> Prototypes {
    Prototypes(
        traces
            .iter()
            .map(|rows| {
                let first = rows.first()?;
                let mut acc = Array1::<f64>::zeros(first.y.len());
                for t in rows {
                    acc.scaled_add(1.0 / t.y_norm, &t.y);
                }
                Some(acc / rows.len() as f64)
            })
            .collect(),
    )
}

/// Class means of per-entry embeddings given in [`SupportSet::entries`] order.
fn prototypes_from_embeddings(support: &SupportSet, embeddings: &[Array1<f64>]) -> Prototypes {
    let mut offset = 0;
    Prototypes(
        (0..support.num_classes())
            .map(|k| {
                let n = support.class(k).len();
                let rows = &embeddings[offset..offset + n];
                offset += n;
                let first = rows.first()?;
                let mut acc = Array1::<f64>::zeros(first.len());
                for r in rows {
                    acc += r;
                }
                Some(acc / n as f64)
            })
            .collect(),
    )
}

/// Normalized classifier rows, used as constant prototypes.
pub fn classifier_prototypes(head: &LinearHead) -> Result<Prototypes> {
    head.weight
        .rows()
        .into_iter()
        .map(|row| {
            let n = norm(row);
            if n < NORM_EPS {
                return Err(Error::ZeroNormVector);
            }
            Ok(Some(row.to_owned() / n))
        })
        .collect::<Result<Vec<_>>>()
        .map(Prototypes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TastBnConfig {
    pub n_s: usize,
    pub steps: usize,
    pub m: i64,
    pub tau: f64,
    pub lr: f64,
    /// Total support entries kept across classes.
    pub global_cap: Option<usize>,
    /// Use normalized classifier rows as prototypes instead of support means.
    pub fixed_prototypes: bool,
    pub seed: u64,
}

impl Default for TastBnConfig {
    fn default() -> Self {
        Self {
            n_s: 1,
            steps: 1,
            m: 100,
            tau: 0.1,
            lr: 0.001,
            global_cap: Some(150),
            fixed_prototypes: false,
            seed: 0,
        }
    }
}

impl TastBnConfig {
    pub fn validate(&self) -> Result<()> {
        class_cap(self.m)?;
        if self.n_s == 0 {
            return Err(Error::InvalidConfig("N_s must be positive".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.global_cap == Some(0) {
            return Err(Error::InvalidConfig("global cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TastBnEngine {
    pub extractor: ToyBNExtractor,
    pub head: LinearHead,
    pub support: SupportSet,
    pub config: TastBnConfig,
    cap: Option<usize>,
    fixed: Option<Prototypes>,
    batches_seen: u64,
}

impl TastBnEngine {
    pub fn new(extractor: ToyBNExtractor, head: LinearHead, config: TastBnConfig) -> Result<Self> {
        config.validate()?;
        if head.dim() != extractor.d_z() {
            return Err(Error::DimensionMismatch { expected: extractor.d_z(), actual: head.dim() });
        }
        let support = SupportSet::init_empty(head.num_classes(), extractor.d_in(), SupportMode::RawInput)?
            .with_global_cap(config.global_cap);
        let fixed = if config.fixed_prototypes {
            Some(classifier_prototypes(&head)?)
        } else {
            None
        };
        Ok(Self {
            cap: class_cap(config.m)?,
            extractor,
            head,
            support,
            config,
            fixed,
            batches_seen: 0,
        })
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    /// The constant prototypes in fixed-prototype mode.
    pub fn fixed_prototypes(&self) -> Option<&Prototypes> {
        self.fixed.as_ref()
    }

    fn prototypes(&self, embeddings: &[Array1<f64>]) -> Prototypes {
        match &self.fixed {
            Some(p) => p.clone(),
            None => prototypes_from_embeddings(&self.support, embeddings),
        }
    }

    fn neighbor_distributions(
        &self,
        neighbors: &NeighborList,
        flat: &dyn Fn(EntryId) -> usize,
        embeddings: &[Array1<f64>],
        protos: &Prototypes,
    ) -> Result<Vec<Distribution>> {
        neighbors
            .iter()
            .map(|n| proto_distribution(embeddings[flat(n.id)].view(), protos, self.config.tau))
            .collect()
    }

    pub fn adapt_batch(&mut self, batch: &[Array1<f64>]) -> Result<BatchOutcome> {
        if batch.len() < 2 {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        let stats = self.extractor.batch_stats(batch)?;
        let batch_emb = self.extractor.embed(batch, &stats)?;
        let items = batch
            .iter()
            .zip(&batch_emb)
            .map(|(x, u)| Ok((x.clone(), self.head.probs(u.view())?)))
            .collect::<Result<Vec<_>>>()?;
        self.support.update(items)?;
        self.support.filter_by_entropy(self.cap);

        // the support layout is fixed from here on
        let keys: Vec<Array1<f64>> = self.support.entries().map(|(_, e)| e.key.clone()).collect();
        let offsets: Vec<usize> = (0..self.support.num_classes())
            .scan(0, |acc, k| {
                let start = *acc;
                *acc += self.support.class(k).len();
                Some(start)
            })
            .collect();
        let flat = |id: EntryId| offsets[id.class] + id.index;

        let support_emb = self.extractor.embed(&keys, &stats)?;
        let neighbors = batch_emb
            .iter()
            .map(|u| self.support.nearest_neighbors_in(u.view(), self.config.n_s, &support_emb))
            .collect::<Result<Vec<_>>>()?;

        let mut loss_sum = 0.0;
        for _ in 0..self.config.steps {
            let support_emb = self.extractor.embed(&keys, &stats)?;
            let protos = self.prototypes(&support_emb);
            let targets = neighbors
                .iter()
                .map(|nl| vote_distribution(&self.neighbor_distributions(nl, &flat, &support_emb, &protos)?))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) =
                self.extractor
                    .loss_and_gradients(batch, &self.support, &targets, self.config.tau, self.fixed.as_ref())?;
            self.extractor.apply_update(&grads, self.config.lr)?;
            loss_sum += loss;
        }

        let support_emb = self.extractor.embed(&keys, &stats)?;
        let protos = self.prototypes(&support_emb);
        let distributions = if protos.present().next().is_none() {
            self.extractor
                .embed(batch, &stats)?
                .iter()
                .map(|u| self.head.probs(u.view()))
                .collect::<Result<Vec<_>>>()?
        } else {
            neighbors
                .iter()
                .map(|nl| mean_distribution(&self.neighbor_distributions(nl, &flat, &support_emb, &protos)?))
                .collect::<Result<Vec<_>>>()?
        };
        self.batches_seen += 1;
        Ok(BatchOutcome {
            predictions: distributions.iter().map(Distribution::argmax).collect(),
            distributions,
            mean_loss: (self.config.steps > 0).then(|| loss_sum / self.config.steps as f64),
        })
    }
}
