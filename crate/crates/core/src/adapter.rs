//! Ensemble of linear adaptation modules with BatchEnsemble weight sharing.
//!
//! Member `i` computes `h_i(z) = (W ∘ r_i s_iᵀ) z = r_i ∘ (W (s_i ∘ z))`.
//! The modules have no bias and no nonlinearity, so a class prototype (the
//! mean image of the class's support keys) is the image of the class's mean
//! key. The backward pass below relies on that.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{
    adam_step, cross_entropy, dot, kaiming_normal, norm, softmax_from_distances, AdamState,
    Distribution, RngSeed, LOG_CLAMP, NORM_EPS,
};
use crate::supportset::{NeighborList, SupportSet};

/// Output width used when none is configured: a quarter of the input, at least 1.
pub fn default_d_phi(d_z: usize) -> usize {
    (d_z / 4).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAdapter {
    /// `d_phi x d_z`, shared by every member.
    pub shared: Array2<f64>,
    /// Per-member output factors, length `d_phi`.
    pub fast_r: Vec<Array1<f64>>,
    /// Per-member input factors, length `d_z`.
    pub fast_s: Vec<Array1<f64>>,
    adam_shared: AdamState,
    adam_r: Vec<AdamState>,
    adam_s: Vec<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub shared: Array2<f64>,
    pub r: Array1<f64>,
    pub s: Array1<f64>,
}

/// Per-class prototypes in one member's output space; `None` for classes
/// with no support.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes(pub Vec<Option<Array1<f64>>>);

impl Prototypes {
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, k: usize) -> Option<&Array1<f64>> {
        self.0[k].as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
    }
}

impl EnsembleAdapter {
    pub fn new(d_z: usize, d_phi: usize, n_e: usize, seed: RngSeed) -> Result<Self> {
        if d_z == 0 || d_phi == 0 || n_e == 0 {
            return Err(Error::InvalidConfig(
                "adapter dimensions and member count must be positive".into(),
            ));
        }
        let mut rng = seed.rng();
        let shared = kaiming_normal(d_phi, d_z, &mut rng);
        let mut sign = |len: usize| -> Array1<f64> {
            Array1::from_shape_simple_fn(len, || if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        };
        let mut fast_r = Vec::with_capacity(n_e);
        let mut fast_s = Vec::with_capacity(n_e);
        for _ in 0..n_e {
            fast_r.push(sign(d_phi));
            fast_s.push(sign(d_z));
        }
        Ok(Self {
            adam_shared: AdamState::new(d_phi * d_z),
            adam_r: vec![AdamState::new(d_phi); n_e],
            adam_s: vec![AdamState::new(d_z); n_e],
            shared,
            fast_r,
            fast_s,
        })
    }

    /// Sets every fast factor to +1, making all members identical.
    pub fn with_unit_factors(mut self) -> Self {
        self.fast_r.iter_mut().for_each(|r| r.fill(1.0));
        self.fast_s.iter_mut().for_each(|s| s.fill(1.0));
        self
    }

    pub fn num_members(&self) -> usize {
        self.fast_r.len()
    }

    pub fn d_z(&self) -> usize {
        self.shared.ncols()
    }

    pub fn d_phi(&self) -> usize {
        self.shared.nrows()
    }

    fn check_member(&self, i: usize) -> Result<()> {
        if i >= self.num_members() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.num_members(),
            });
        }
        Ok(())
    }

    fn check_input(&self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.d_z() {
            return Err(Error::DimensionMismatch {
                expected: self.d_z(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// `W ∘ r_i s_iᵀ`.
    pub fn member_weight(&self, i: usize) -> Result<Array2<f64>> {
        self.check_member(i)?;
        let (r, s) = (&self.fast_r[i], &self.fast_s[i]);
        let mut w = self.shared.clone();
        for (a, mut row) in w.rows_mut().into_iter().enumerate() {
            Zip::from(&mut row).and(s).for_each(|x, &sb| *x *= r[a] * sb);
        }
        Ok(w)
    }

    pub fn forward(&self, i: usize, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_member(i)?;
        self.check_input(z)?;
        let scaled = &z * &self.fast_s[i];
        Ok(self.shared.dot(&scaled) * &self.fast_r[i])
    }

    /// Same map as [`forward`](Self::forward) through the materialized weight.
    pub fn forward_materialized(&self, i: usize, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(z)?;
        Ok(self.member_weight(i)?.dot(&z))
    }

    /// Mean image of each class's support keys under member `i`.
    pub fn compute_prototypes(&self, i: usize, set: &SupportSet) -> Result<Prototypes> {
        self.check_member(i)?;
        let mut out = Vec::with_capacity(set.num_classes());
        for k in 0..set.num_classes() {
            let entries = set.class(k);
            if entries.is_empty() {
                out.push(None);
                continue;
            }
            let mut acc = Array1::<f64>::zeros(self.d_phi());
            for e in entries {
                acc += &self.forward(i, e.key.view())?;
            }
            out.push(Some(acc / entries.len() as f64));
        }
        Ok(Prototypes(out))
    }

    /// Prototypes from precomputed class means of the keys, using linearity.
    pub fn prototypes_from_means(
        &self,
        i: usize,
        means: &[Option<Array1<f64>>],
    ) -> Result<Prototypes> {
        let w = self.member_weight(i)?;
        Ok(Prototypes(
            means
                .iter()
                .map(|m| m.as_ref().map(|m| w.dot(m)))
                .collect(),
        ))
    }

    /// Adam steps on `W` (shared state) and on member `i`'s fast factors.
    pub fn apply_update(&mut self, i: usize, grads: &AdapterGradients, lr: f64) -> Result<()> {
        self.check_member(i)?;
        if grads.shared.dim() != self.shared.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.shared.len(),
                actual: grads.shared.len(),
            });
        }
        adam_step(
            self.shared.as_slice_mut().expect("standard layout"),
            grads.shared.as_slice().expect("standard layout"),
            &mut self.adam_shared,
            lr,
        )?;
        adam_step(
            self.fast_r[i].as_slice_mut().expect("contiguous"),
            grads.r.as_slice().expect("contiguous"),
            &mut self.adam_r[i],
            lr,
        )?;
        adam_step(
            self.fast_s[i].as_slice_mut().expect("contiguous"),
            grads.s.as_slice().expect("contiguous"),
            &mut self.adam_s[i],
            lr,
        )?;
        Ok(())
    }

    pub fn shared_adam_steps(&self) -> u64 {
        self.adam_shared.t
    }

    /// Loss of member `i` over a batch and its exact gradient.
    ///
    /// Pseudo-labels are formed from the neighbors' current prototype
    /// predictions and then held constant.
    pub fn loss_and_gradients(
        &self,
        i: usize,
        batch: &[Array1<f64>],
        neighbors: &[NeighborList],
        set: &SupportSet,
        tau: f64,
    ) -> Result<(f64, AdapterGradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if neighbors.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                expected: batch.len(),
                actual: neighbors.len(),
            });
        }
        let means = set.class_means();
        let protos = self.prototypes_from_means(i, &means)?;
        let mut targets = Vec::with_capacity(batch.len());
        for nl in neighbors {
            let dists = nl
                .iter()
                .map(|n| proto_distribution(self.forward(i, set.entry(n.id).key.view())?.view(), &protos, tau))
                .collect::<Result<Vec<_>>>()?;
            targets.push(crate::tast::vote_distribution(&dists)?);
        }
        self.loss_and_gradients_with_targets(i, batch, &targets, &means, tau)
    }

    /// Loss and gradient given fixed targets and the support's class means.
    pub fn loss_and_gradients_with_targets(
        &self,
        i: usize,
        batch: &[Array1<f64>],
        targets: &[Distribution],
        means: &[Option<Array1<f64>>],
        tau: f64,
    ) -> Result<(f64, AdapterGradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let w = self.member_weight(i)?;
        let protos: Vec<Option<Array1<f64>>> =
            means.iter().map(|m| m.as_ref().map(|m| w.dot(m))).collect();
        if protos.iter().all(Option::is_none) {
            return Err(Error::NoPrototypes);
        }
        for f in batch {
            self.check_input(f.view())?;
        }
        let images: Vec<Array1<f64>> = batch.iter().map(|f| w.dot(f)).collect();
        let protos = Prototypes(protos);
        let ce = proto_cross_entropy_backward(&images, targets, &protos, tau)?;
        let mut g_a = Array2::<f64>::zeros(w.dim());
        for (g_v, f) in ce.g_queries.iter().zip(batch) {
            add_outer(&mut g_a, g_v, f);
        }
        for (k, g) in ce.g_protos.iter().enumerate() {
            if let (Some(g), Some(m)) = (g, &means[k]) {
                add_outer(&mut g_a, g, m);
            }
        }
        let loss = ce.loss;

        let (r, s) = (&self.fast_r[i], &self.fast_s[i]);
        let mut g_shared = g_a.clone();
        let mut g_r = Array1::<f64>::zeros(r.len());
        let mut g_s = Array1::<f64>::zeros(s.len());
        for a in 0..g_a.nrows() {
            for b in 0..g_a.ncols() {
                let gab = g_a[[a, b]];
                let wab = self.shared[[a, b]];
                g_shared[[a, b]] = gab * r[a] * s[b];
                g_r[a] += gab * wab * s[b];
                g_s[b] += gab * wab * r[a];
            }
        }
        Ok((
            loss,
            AdapterGradients {
                shared: g_shared,
                r: g_r,
                s: g_s,
            },
        ))
    }
}

fn add_outer(acc: &mut Array2<f64>, left: &Array1<f64>, right: &Array1<f64>) {
    for (a, mut row) in acc.rows_mut().into_iter().enumerate() {
        let la = left[a];
        if la != 0.0 {
            row.scaled_add(la, right);
        }
    }
}

/// Mean cross-entropy between `targets` and the prototype distributions of
/// `queries`, with gradients for every query and present prototype.
pub(crate) struct ProtoCrossEntropy {
    pub loss: f64,
    pub g_queries: Vec<Array1<f64>>,
    pub g_protos: Vec<Option<Array1<f64>>>,
}

pub(crate) fn proto_cross_entropy_backward(
    queries: &[Array1<f64>],
    targets: &[Distribution],
    protos: &Prototypes,
    tau: f64,
) -> Result<ProtoCrossEntropy> {
    if queries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != queries.len() {
        return Err(Error::ShapeMismatch {
            expected: queries.len(),
            actual: targets.len(),
        });
    }
    let present: Vec<(usize, &Array1<f64>)> = protos.present().collect();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    let proto_norms: Vec<f64> = present.iter().map(|(_, p)| norm(p.view())).collect();
    if proto_norms.iter().any(|&n| n < NORM_EPS) {
        return Err(Error::ZeroNormVector);
    }

    let scale = 1.0 / queries.len() as f64;
    let mut loss = 0.0;
    let mut g_queries = Vec::with_capacity(queries.len());
    let mut g_present: Vec<Array1<f64>> = present.iter().map(|(_, p)| Array1::zeros(p.len())).collect();
    for (v, q) in queries.iter().zip(targets) {
        let v_norm = norm(v.view());
        if v_norm < NORM_EPS {
            return Err(Error::ZeroNormVector);
        }
        let cosines: Vec<f64> = present
            .iter()
            .zip(&proto_norms)
            .map(|((_, mu), n)| dot(v.view(), mu.view()) / (v_norm * n))
            .collect();
        let dists: Vec<f64> = cosines.iter().map(|c| 1.0 - c).collect();
        let p_present = softmax_from_distances(&dists, tau);
        let mut p_full = vec![0.0; protos.num_classes()];
        for ((k, _), &p) in present.iter().zip(p_present.probs()) {
            p_full[*k] = p;
        }
        loss += scale * cross_entropy(q, &Distribution::from_raw(p_full));

        // d(-sum_active q_k ln p_k)/d logit_j = -q_j [j active] + p_j * sum_active q
        let q_active: Vec<f64> = present
            .iter()
            .zip(p_present.probs())
            .map(|((k, _), &p)| if p >= LOG_CLAMP { q.probs()[*k] } else { 0.0 })
            .collect();
        let q_mass: f64 = q_active.iter().sum();

        let mut g_v = Array1::<f64>::zeros(v.len());
        for (j, (_, mu)) in present.iter().enumerate() {
            let g_logit = scale * (p_present.probs()[j] * q_mass - q_active[j]);
            // logit = -d / tau = (cos - 1) / tau
            let g_cos = g_logit / tau;
            if g_cos == 0.0 {
                continue;
            }
            let mu_norm = proto_norms[j];
            let denom = v_norm * mu_norm;
            let c = cosines[j];
            // d cos / d v = mu / (|v||mu|) - cos v / |v|^2, and symmetrically for mu
            g_v.scaled_add(g_cos / denom, *mu);
            g_v.scaled_add(-g_cos * c / (v_norm * v_norm), v);
            g_present[j].scaled_add(g_cos / denom, v);
            g_present[j].scaled_add(-g_cos * c / (mu_norm * mu_norm), *mu);
        }
        g_queries.push(g_v);
    }
    let mut g_protos = vec![None; protos.num_classes()];
    for ((k, _), g) in present.iter().zip(g_present) {
        g_protos[*k] = Some(g);
    }
    Ok(ProtoCrossEntropy {
        loss,
        g_queries,
        g_protos,
    })
}

/// Softmax over negative cosine distances to the present prototypes;
/// classes without a prototype get probability 0.
pub fn proto_distribution(v: ArrayView1<f64>, protos: &Prototypes, tau: f64) -> Result<Distribution> {
    let present: Vec<(usize, &Array1<f64>)> = protos.present().collect();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    let dists = present
        .iter()
        .map(|(_, p)| crate::mathcore::cosine_distance(v, p.view()))
        .collect::<Result<Vec<_>>>()?;
    let soft = softmax_from_distances(&dists, tau);
    let mut full = vec![0.0; protos.num_classes()];
    for ((k, _), p) in present.iter().zip(soft.probs()) {
        full[*k] = *p;
    }
    Ok(Distribution::from_raw(full))
}
