//! The adaptation loop over test batches, plus the frozen-backbone baselines.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapter::{default_d_phi, proto_distribution, EnsembleAdapter, Prototypes};
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::mathcore::{
    adam_step, argmax, cosine_distance, shannon_entropy, AdamState, Distribution, RngSeed,
};
use crate::supportset::{NeighborList, SupportSet};

/// Converts the per-class cap sentinel (`-1` = keep everything) into an
/// optional cap.
pub fn class_cap(m: i64) -> Result<Option<usize>> {
    match m {
        -1 => Ok(None),
        m if m >= 1 => Ok(Some(m as usize)),
        m => Err(Error::InvalidConfig(format!(
            "per-class cap must be -1 or positive, got {m}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TastConfig {
    /// Number of adaptation modules.
    pub n_e: usize,
    /// Nearby support examples per query.
    pub n_s: usize,
    /// Gradient steps per batch.
    pub steps: usize,
    /// Support entries kept per class, `-1` for no filtering.
    pub m: i64,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    /// Adapter output width; `None` means a quarter of the feature width.
    pub d_phi: Option<usize>,
}

impl Default for TastConfig {
    fn default() -> Self {
        Self {
            n_e: 20,
            n_s: 1,
            steps: 1,
            m: 100,
            tau: 0.1,
            lr: 0.001,
            seed: 0,
            d_phi: None,
        }
    }
}

impl TastConfig {
    pub fn validate(&self) -> Result<()> {
        class_cap(self.m)?;
        if self.n_e == 0 || self.n_s == 0 {
            return Err(Error::InvalidConfig("N_e and N_s must be positive".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.d_phi == Some(0) {
            return Err(Error::InvalidConfig("d_phi must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of neighbors whose distribution peaks at each class.
pub fn vote_distribution(neighbor_dists: &[Distribution]) -> Result<Distribution> {
    let first = neighbor_dists.first().ok_or(Error::EmptyNeighborList)?;
    let mut counts = vec![0usize; first.len()];
    for d in neighbor_dists {
        counts[d.argmax()] += 1;
    }
    let n = neighbor_dists.len() as f64;
    Ok(Distribution::from_raw(
        counts.into_iter().map(|c| c as f64 / n).collect(),
    ))
}

/// Elementwise mean of distributions.
pub fn mean_distribution(dists: &[Distribution]) -> Result<Distribution> {
    let first = dists.first().ok_or(Error::EmptyNeighborList)?;
    let mut acc = vec![0.0; first.len()];
    for d in dists {
        for (a, p) in acc.iter_mut().zip(d.probs()) {
            *a += p;
        }
    }
    let n = dists.len() as f64;
    Ok(Distribution::from_raw(acc.into_iter().map(|a| a / n).collect()))
}

fn neighbor_distributions(
    adapter: &EnsembleAdapter,
    i: usize,
    neighbors: &NeighborList,
    set: &SupportSet,
    protos: &Prototypes,
    tau: f64,
) -> Result<Vec<Distribution>> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborList);
    }
    neighbors
        .iter()
        .map(|n| {
            let img = adapter.forward(i, set.entry(n.id).key.view())?;
            proto_distribution(img.view(), protos, tau)
        })
        .collect()
}

/// One-hot votes of member `i`'s prototype predictions on the neighbors.
pub fn pseudo_label(
    adapter: &EnsembleAdapter,
    i: usize,
    neighbors: &NeighborList,
    set: &SupportSet,
    protos: &Prototypes,
    tau: f64,
) -> Result<Distribution> {
    vote_distribution(&neighbor_distributions(adapter, i, neighbors, set, protos, tau)?)
}

/// Mean of member `i`'s soft prototype predictions on the neighbors.
pub fn member_predict(
    adapter: &EnsembleAdapter,
    i: usize,
    neighbors: &NeighborList,
    set: &SupportSet,
    protos: &Prototypes,
    tau: f64,
) -> Result<Distribution> {
    mean_distribution(&neighbor_distributions(adapter, i, neighbors, set, protos, tau)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub distributions: Vec<Distribution>,
    /// Mean training loss over the batch's gradient steps, if any were taken.
    pub mean_loss: Option<f64>,
}

/// Online state for one test stream.
#[derive(Debug, Clone)]
pub struct TastEngine {
    pub head: LinearHead,
    pub support: SupportSet,
    pub adapter: EnsembleAdapter,
    pub config: TastConfig,
    cap: Option<usize>,
    batches_seen: u64,
}

impl TastEngine {
    pub fn new(head: LinearHead, config: TastConfig) -> Result<Self> {
        config.validate()?;
        let d_z = head.dim();
        let d_phi = config.d_phi.unwrap_or_else(|| default_d_phi(d_z));
        let adapter = EnsembleAdapter::new(d_z, d_phi, config.n_e, RngSeed(config.seed))?;
        Self::with_adapter(head, config, adapter)
    }

    pub fn with_adapter(head: LinearHead, config: TastConfig, adapter: EnsembleAdapter) -> Result<Self> {
        config.validate()?;
        if adapter.d_z() != head.dim() {
            return Err(Error::DimensionMismatch {
                expected: head.dim(),
                actual: adapter.d_z(),
            });
        }
        Ok(Self {
            support: SupportSet::init_from_classifier(&head)?,
            cap: class_cap(config.m)?,
            head,
            adapter,
            config,
            batches_seen: 0,
        })
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    /// Adds the batch to the support set with the base classifier's labels
    /// and applies the per-class entropy filter.
    fn update_support(&mut self, batch: &[Array1<f64>]) -> Result<()> {
        let items = batch
            .iter()
            .map(|f| Ok((f.clone(), self.head.probs(f.view())?)))
            .collect::<Result<Vec<_>>>()?;
        self.support.update(items)?;
        self.support.filter_by_entropy(self.cap);
        Ok(())
    }

    pub fn adapt_batch(&mut self, batch: &[Array1<f64>]) -> Result<BatchOutcome> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for f in batch {
            if f.len() != self.head.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.head.dim(),
                    actual: f.len(),
                });
            }
        }
        self.update_support(batch)?;
        let neighbors = batch
            .iter()
            .map(|f| self.support.nearest_neighbors(f.view(), self.config.n_s))
            .collect::<Result<Vec<_>>>()?;
        // keys stay fixed for the rest of the batch
        let means = self.support.class_means();
        let neighbor_keys: Vec<Vec<&Array1<f64>>> = neighbors
            .iter()
            .map(|nl| nl.iter().map(|n| &self.support.entry(n.id).key).collect())
            .collect();

        let tau = self.config.tau;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for _ in 0..self.config.steps {
            for i in 0..self.adapter.num_members() {
                let w = self.adapter.member_weight(i)?;
                let protos = Prototypes(
                    means.iter().map(|m| m.as_ref().map(|m| w.dot(m))).collect(),
                );
                let targets = neighbor_keys
                    .iter()
                    .map(|keys| {
                        let dists = keys
                            .iter()
                            .map(|k| proto_distribution(w.dot(*k).view(), &protos, tau))
                            .collect::<Result<Vec<_>>>()?;
                        vote_distribution(&dists)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (loss, grads) =
                    self.adapter
                        .loss_and_gradients_with_targets(i, batch, &targets, &means, tau)?;
                self.adapter.apply_update(i, &grads, self.config.lr)?;
                loss_sum += loss;
                loss_count += 1;
            }
        }

        let k = self.head.num_classes();
        let mut acc = vec![vec![0.0; k]; batch.len()];
        for i in 0..self.adapter.num_members() {
            let w = self.adapter.member_weight(i)?;
            let protos = Prototypes(means.iter().map(|m| m.as_ref().map(|m| w.dot(m))).collect());
            for (keys, row) in neighbor_keys.iter().zip(acc.iter_mut()) {
                let dists = keys
                    .iter()
                    .map(|key| proto_distribution(w.dot(*key).view(), &protos, tau))
                    .collect::<Result<Vec<_>>>()?;
                let member = mean_distribution(&dists)?;
                for (a, p) in row.iter_mut().zip(member.probs()) {
                    *a += p;
                }
            }
        }
        let n_e = self.adapter.num_members() as f64;
        let distributions: Vec<Distribution> = acc
            .into_iter()
            .map(|row| Distribution::from_raw(row.into_iter().map(|a| a / n_e).collect()))
            .collect();
        self.batches_seen += 1;
        Ok(BatchOutcome {
            predictions: distributions.iter().map(Distribution::argmax).collect(),
            distributions,
            mean_loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
        })
    }
}

fn feature_prototypes(support: &SupportSet) -> Prototypes {
    Prototypes(support.class_means())
}

/// Nearest class centroid in feature space; ties to the lowest class.
pub fn t3a_predict(support: &SupportSet, query: &Array1<f64>) -> Result<usize> {
    let protos = feature_prototypes(support);
    let mut best: Option<(usize, f64)> = None;
    for (k, mu) in protos.present() {
        let d = cosine_distance(query.view(), mu.view())?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k).ok_or(Error::EmptySupportSet)
}

/// Neighbor-averaged prototype prediction computed directly in feature
/// space, without adaptation modules.
pub fn tast_n_predict(
    support: &SupportSet,
    query: &Array1<f64>,
    n_s: usize,
    tau: f64,
) -> Result<(usize, Distribution)> {
    let protos = feature_prototypes(support);
    let neighbors = support.nearest_neighbors(query.view(), n_s)?;
    let dists = neighbors
        .iter()
        .map(|n| proto_distribution(support.entry(n.id).key.view(), &protos, tau))
        .collect::<Result<Vec<_>>>()?;
    let p = mean_distribution(&dists)?;
    Ok((p.argmax(), p))
}

/// Support-set-only baselines: T3A and TAST-N.
#[derive(Debug, Clone)]
pub struct PrototypeEngine {
    pub head: LinearHead,
    pub support: SupportSet,
    cap: Option<usize>,
}

impl PrototypeEngine {
    pub fn new(head: LinearHead, m: i64) -> Result<Self> {
        Ok(Self {
            support: SupportSet::init_from_classifier(&head)?,
            cap: class_cap(m)?,
            head,
        })
    }

    fn update(&mut self, batch: &[Array1<f64>]) -> Result<()> {
        let items = batch
            .iter()
            .map(|f| Ok((f.clone(), self.head.probs(f.view())?)))
            .collect::<Result<Vec<_>>>()?;
        self.support.update(items)?;
        self.support.filter_by_entropy(self.cap);
        Ok(())
    }

    pub fn t3a_batch(&mut self, batch: &[Array1<f64>]) -> Result<Vec<usize>> {
        self.update(batch)?;
        batch.iter().map(|f| t3a_predict(&self.support, f)).collect()
    }

    pub fn tast_n_batch(
        &mut self,
        batch: &[Array1<f64>],
        n_s: usize,
        tau: f64,
    ) -> Result<Vec<(usize, Distribution)>> {
        self.update(batch)?;
        batch
            .iter()
            .map(|f| tast_n_predict(&self.support, f, n_s, tau))
            .collect()
    }
}

/// Objective value and gradients with respect to a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub loss: f64,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Mean prediction entropy of the head over the batch, with gradients.
pub fn entropy_objective(head: &LinearHead, batch: &[Array1<f64>]) -> Result<HeadGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = HeadGradients {
        loss: 0.0,
        weight: Array2::zeros(head.weight.dim()),
        bias: Array1::zeros(head.num_classes()),
    };
    for f in batch {
        let p = head.probs(f.view())?;
        let h = shannon_entropy(&p);
        out.loss += scale * h;
        // dH/dlogit_k = -p_k (ln p_k + H)
        let g: Array1<f64> = p
            .probs()
            .iter()
            .map(|&pk| if pk > 0.0 { -scale * pk * (pk.ln() + h) } else { 0.0 })
            .collect();
        accumulate_head_grad(&mut out, &g, f);
    }
    Ok(out)
}

/// Cross-entropy against one-hot argmax labels over the examples whose top
/// probability reaches `threshold`. `None` if no example qualifies.
pub fn pseudo_label_objective(
    head: &LinearHead,
    batch: &[Array1<f64>],
    threshold: f64,
) -> Result<Option<HeadGradients>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut confident = Vec::new();
    for f in batch {
        let p = head.probs(f.view())?;
        let top = p.argmax();
        if p.probs()[top] >= threshold {
            confident.push((f, p, top));
        }
    }
    if confident.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / confident.len() as f64;
    let mut out = HeadGradients {
        loss: 0.0,
        weight: Array2::zeros(head.weight.dim()),
        bias: Array1::zeros(head.num_classes()),
    };
    for (f, p, top) in confident {
        out.loss -= scale * p.probs()[top].max(crate::mathcore::LOG_CLAMP).ln();
        let mut g: Array1<f64> = p.probs().iter().map(|pk| scale * pk).collect();
        g[top] -= scale;
        accumulate_head_grad(&mut out, &g, f);
    }
    Ok(Some(out))
}

fn accumulate_head_grad(out: &mut HeadGradients, g_logits: &Array1<f64>, f: &Array1<f64>) {
    for (k, mut row) in out.weight.rows_mut().into_iter().enumerate() {
        row.scaled_add(g_logits[k], f);
    }
    out.bias += g_logits;
}

/// Confidence threshold used by the pseudo-label baseline.
pub const PL_THRESHOLD: f64 = 0.9;

/// A linear head fine-tuned online with Adam (TentClf / PLClf).
#[derive(Debug, Clone)]
pub struct HeadTuner {
    pub head: LinearHead,
    adam_w: AdamState,
    adam_b: AdamState,
}

impl HeadTuner {
    pub fn new(head: LinearHead) -> Self {
        Self {
            adam_w: AdamState::new(head.weight.len()),
            adam_b: AdamState::new(head.bias.len()),
            head,
        }
    }

    fn apply(&mut self, g: &HeadGradients, lr: f64) -> Result<()> {
        adam_step(
            self.head.weight.as_slice_mut().expect("standard layout"),
            g.weight.as_slice().expect("standard layout"),
            &mut self.adam_w,
            lr,
        )?;
        adam_step(
            self.head.bias.as_slice_mut().expect("contiguous"),
            g.bias.as_slice().expect("contiguous"),
            &mut self.adam_b,
            lr,
        )
    }

    /// One entropy-minimization step; returns the pre-step loss.
    pub fn tentclf_step(&mut self, batch: &[Array1<f64>], lr: f64) -> Result<f64> {
        let g = entropy_objective(&self.head, batch)?;
        self.apply(&g, lr)?;
        Ok(g.loss)
    }

    /// One confident-pseudo-label step; returns the pre-step loss, or
    /// `None` (and leaves the head untouched) when nothing qualifies.
    pub fn plclf_step(&mut self, batch: &[Array1<f64>], lr: f64, threshold: f64) -> Result<Option<f64>> {
        match pseudo_label_objective(&self.head, batch, threshold)? {
            Some(g) => {
                self.apply(&g, lr)?;
                Ok(Some(g.loss))
            }
            None => Ok(None),
        }
    }

    pub fn predict(&self, batch: &[Array1<f64>]) -> Result<Vec<usize>> {
        batch
            .iter()
            .map(|f| Ok(argmax(self.head.logits(f.view())?.as_slice().expect("contiguous"))))
            .collect()
    }
}
