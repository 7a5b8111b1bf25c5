//! The pseudo-labeled support set.
//!
//! Entries are grouped by the class the base classifier assigned them.
//! Every entry caches the entropy of that assignment at insertion time, and
//! that cached value drives both the per-class filter and global eviction.
//! Global eviction always trims the largest class, so a confident class
//! cannot crowd the others out.

use std::cmp::Ordering;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::mathcore::{cosine_distance, norm, shannon_entropy, Distribution, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportMode {
    /// Keys are unit-norm feature vectors.
    Feature,
    /// Keys are raw inputs; distances are taken between caller-supplied
    /// embeddings of them.
    RawInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub key: Array1<f64>,
    pub class: usize,
    pub entropy: f64,
    pub seq: u64,
}

/// Position of an entry: `classes[class][index]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntryId {
    pub class: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: EntryId,
    pub seq: u64,
    pub distance: f64,
}

/// Neighbors sorted by ascending distance, ties by ascending `seq`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Distance to the farthest retained neighbor.
    pub fn radius(&self) -> Option<f64> {
        self.neighbors.last().map(|n| n.distance)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter()
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.seq.cmp(&b.seq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    classes: Vec<Vec<SupportEntry>>,
    mode: SupportMode,
    dim: usize,
    global_cap: Option<usize>,
    next_seq: u64,
}

impl SupportSet {
    /// Seeds each class with its normalized classifier row.
    pub fn init_from_classifier(head: &LinearHead) -> Result<Self> {
        let k = head.num_classes();
        let mut classes = Vec::with_capacity(k);
        for (c, row) in head.weight.rows().into_iter().enumerate() {
            let n = norm(row);
            if n < NORM_EPS {
                return Err(Error::ZeroNormVector);
            }
            let key = row.to_owned() / n;
            let entropy = shannon_entropy(&head.probs(key.view())?);
            classes.push(vec![SupportEntry {
                key,
                class: c,
                entropy,
                seq: c as u64,
            }]);
        }
        Ok(Self {
            classes,
            mode: SupportMode::Feature,
            dim: head.dim(),
            global_cap: None,
            next_seq: k as u64,
        })
    }

    pub fn init_empty(num_classes: usize, dim: usize, mode: SupportMode) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            classes: vec![Vec::new(); num_classes],
            mode,
            dim,
            global_cap: None,
            next_seq: 0,
        })
    }

    pub fn with_global_cap(mut self, cap: Option<usize>) -> Self {
        self.global_cap = cap;
        self.enforce_global_cap();
        self
    }

    pub fn mode(&self) -> SupportMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn global_cap(&self) -> Option<usize> {
        self.global_cap
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, k: usize) -> &[SupportEntry] {
        &self.classes[k]
    }

    pub fn entry(&self, id: EntryId) -> &SupportEntry {
        &self.classes[id.class][id.index]
    }

    /// All entries, class by class, in stored order.
    pub fn entries(&self) -> impl Iterator<Item = (EntryId, &SupportEntry)> {
        self.classes.iter().enumerate().flat_map(|(class, list)| {
            list.iter()
                .enumerate()
                .map(move |(index, e)| (EntryId { class, index }, e))
        })
    }

    /// Inserts each key under the argmax of its base-classifier
    /// distribution, then evicts down to the global cap if one is set.
    pub fn update<I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (Array1<f64>, Distribution)>,
    {
        for (key, probs) in items {
            if key.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: key.len(),
                });
            }
            if probs.len() != self.classes.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.classes.len(),
                    actual: probs.len(),
                });
            }
            let class = probs.argmax();
            let entry = SupportEntry {
                key,
                class,
                entropy: shannon_entropy(&probs),
                seq: self.next_seq,
            };
            self.next_seq += 1;
            self.classes[class].push(entry);
        }
        self.enforce_global_cap();
        Ok(())
    }

    /// Evicts one entry at a time from the largest class (lowest index on
    /// ties), taking its highest-entropy entry, oldest first among equals.
    fn enforce_global_cap(&mut self) {
        let Some(cap) = self.global_cap else { return };
        let mut total = self.len();
        while total > cap {
            let class = (0..self.classes.len())
                .rev()
                .max_by_key(|&k| self.classes[k].len())
                .expect("at least two classes");
            let list = &mut self.classes[class];
            let worst = (0..list.len())
                .max_by(|&a, &b| {
                    list[a]
                        .entropy
                        .total_cmp(&list[b].entropy)
                        .then_with(|| list[b].seq.cmp(&list[a].seq))
                })
                .expect("largest class is non-empty");
            list.remove(worst);
            total -= 1;
        }
    }

    /// Keeps the `cap` lowest-entropy entries of each class (smaller `seq`
    /// wins ties). `None` keeps everything.
    pub fn filter_by_entropy(&mut self, cap: Option<usize>) {
        let Some(cap) = cap else { return };
        for list in &mut self.classes {
            if list.len() <= cap {
                continue;
            }
            list.sort_by(|a, b| a.entropy.total_cmp(&b.entropy).then_with(|| a.seq.cmp(&b.seq)));
            list.truncate(cap);
            list.sort_by_key(|e| e.seq);
        }
    }

    /// Mean key of each non-empty class.
    pub fn class_means(&self) -> Vec<Option<Array1<f64>>> {
        self.classes
            .iter()
            .map(|list| {
                let first = list.first()?;
                let mut acc = Array1::<f64>::zeros(first.key.len());
                for e in list {
                    acc += &e.key;
                }
                Some(acc / list.len() as f64)
            })
            .collect()
    }

    fn check_query(&self, query: ArrayView1<f64>, n_s: usize) -> Result<()> {
        if n_s == 0 {
            return Err(Error::InvalidConfig("N_s must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptySupportSet);
        }
        if norm(query) < NORM_EPS {
            return Err(Error::ZeroNormVector);
        }
        Ok(())
    }

    fn all_distances<'a, F>(&'a self, query: ArrayView1<f64>, embed: F) -> Result<Vec<Neighbor>>
    where
        F: Fn(EntryId, &'a SupportEntry) -> ArrayView1<'a, f64>,
    {
        self.entries()
            .map(|(id, e)| {
                Ok(Neighbor {
                    id,
                    seq: e.seq,
                    distance: cosine_distance(query, embed(id, e))?,
                })
            })
            .collect()
    }

    /// The `n_s` entries closest to `query` in cosine distance, pooled
    /// across classes. Feature mode only.
    pub fn nearest_neighbors(&self, query: ArrayView1<f64>, n_s: usize) -> Result<NeighborList> {
        self.require_feature_mode()?;
        self.check_query(query, n_s)?;
        let all = self.all_distances(query, |_, e| e.key.view())?;
        Ok(select_smallest(all, n_s))
    }

    /// Like [`nearest_neighbors`](Self::nearest_neighbors), comparing the
    /// query against `embeddings[j]`, the embedding of the `j`-th entry in
    /// [`entries`](Self::entries) order.
    pub fn nearest_neighbors_in(
        &self,
        query: ArrayView1<f64>,
        n_s: usize,
        embeddings: &[Array1<f64>],
    ) -> Result<NeighborList> {
        self.check_query(query, n_s)?;
        if embeddings.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: embeddings.len(),
            });
        }
        let all = self
            .entries()
            .zip(embeddings)
            .map(|((id, e), emb)| {
                Ok(Neighbor {
                    id,
                    seq: e.seq,
                    distance: cosine_distance(query, emb.view())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(select_smallest(all, n_s))
    }

    /// Exhaustive reference for [`nearest_neighbors`](Self::nearest_neighbors):
    /// repeatedly scans for the smallest remaining `(distance, seq)`.
    pub fn brute_force_neighbors(&self, query: ArrayView1<f64>, n_s: usize) -> Result<NeighborList> {
        self.require_feature_mode()?;
        self.check_query(query, n_s)?;
        let mut remaining = self.all_distances(query, |_, e| e.key.view())?;
        let mut out = Vec::with_capacity(n_s.min(remaining.len()));
        while out.len() < n_s && !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                let (a, b) = (&remaining[j], &remaining[best]);
                if a.distance < b.distance || (a.distance == b.distance && a.seq < b.seq) {
                    best = j;
                }
            }
            out.push(remaining.swap_remove(best));
        }
        Ok(NeighborList { neighbors: out })
    }

    fn require_feature_mode(&self) -> Result<()> {
        match self.mode {
            SupportMode::Feature => Ok(()),
            SupportMode::RawInput => Err(Error::InvalidConfig(
                "raw-input support sets need caller-supplied embeddings".into(),
            )),
        }
    }
}

fn select_smallest(mut all: Vec<Neighbor>, n_s: usize) -> NeighborList {
    if n_s < all.len() {
        all.select_nth_unstable_by(n_s - 1, neighbor_order);
        all.truncate(n_s);
    }
    all.sort_by(neighbor_order);
    NeighborList { neighbors: all }
}
