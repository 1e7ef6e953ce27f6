//! Bounded exemplar memory with herding selection.
//!
//! Each class keeps a priority-ordered list: earlier exemplars were picked
//! first by herding and survive every later reduction.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{class_means_from_groups, MeanReport};
use crate::numkit::{Matrix, Normalized};
use crate::stream::Sample;

/// A stored labeled sample. Only the raw input is kept; features are
/// recomputed with whatever model is current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: u64,
    pub features: Vec<f64>,
}

/// Greedy herding over per-sample features (rows of `features`).
///
/// Step `k` picks the candidate minimising
/// `| mu - (F(x) + sum of already picked) / k |`, where `mu` is the mean of
/// all candidates. Candidates are not removed once picked, and ties go to
/// the lowest id. Returns indices into the candidate list.
pub fn herding_order(ids: &[u64], features: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if ids.len() != n {
        return Err(Error::Dimension {
            op: "herding_order",
            expected: (n, 1),
            found: (ids.len(), 1),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = if m > n {
        warn!("herding asked for {m} exemplars from {n} samples; keeping {n}");
        n
    } else {
        m
    };
    let d = features.cols();
    let mut mean = alloc::vec![0.0; d];
    for r in 0..n {
        for (acc, v) in mean.iter_mut().zip(features.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut picked_sum = alloc::vec![0.0; d];
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let inv_k = 1.0 / k as f64;
        let mut best: Option<(f64, u64, usize)> = None;
        for i in 0..n {
            let dist: f64 = features
                .row(i)
                .iter()
                .zip(&picked_sum)
                .zip(&mean)
                .map(|((f, s), mu)| {
                    let diff = mu - (f + s) * inv_k;
                    diff * diff
                })
                .sum();
            let better = match best {
                None => true,
                Some((bd, bid, _)) => dist < bd || (dist == bd && ids[i] < bid),
            };
            if better {
                best = Some((dist, ids[i], i));
            }
        }
        let (_, _, idx) = best.expect("n > 0");
        for (s, f) in picked_sum.iter_mut().zip(features.row(idx)) {
            *s += f;
        }
        order.push(idx);
    }
    Ok(order)
}

/// Herding selection of up to `m` exemplars from one class.
pub fn construct_exemplar_set(samples: &[Sample], features: &Matrix, m: usize) -> Result<Vec<Exemplar>> {
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let order = herding_order(&ids, features, m)?;
    Ok(order
        .into_iter()
        .map(|i| Exemplar { id: samples[i].id, features: samples[i].features.clone() })
        .collect())
}

/// Keeps the first `m` entries.
pub fn reduce_exemplar_set<T: Clone>(exemplars: &[T], m: usize) -> Vec<T> {
    exemplars[..m.min(exemplars.len())].to_vec()
}

/// `ceil(capacity / observed)`.
pub fn per_class_quota(capacity: usize, observed: usize) -> usize {
    if observed == 0 {
        0
    } else {
        capacity.div_ceil(observed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBuffer {
    capacity: usize,
    per_class: BTreeMap<usize, Vec<Exemplar>>,
}

/// What one call to [`ExemplarBuffer::rebalance`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceReport {
    pub quota: usize,
    pub observed_classes: usize,
    /// Exemplars trimmed to respect the capacity after applying the quota.
    pub trimmed: usize,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, per_class: BTreeMap::new() }
    }

    pub fn from_parts(capacity: usize, per_class: BTreeMap<usize, Vec<Exemplar>>) -> Result<Self> {
        let b = Self { capacity, per_class };
        if b.len() > capacity {
            return Err(Error::Contract("exemplar buffer over capacity".into()));
        }
        Ok(b)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class(&self, class: usize) -> &[Exemplar] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn per_class(&self) -> &BTreeMap<usize, Vec<Exemplar>> {
        &self.per_class
    }

    /// Every exemplar with its class, in class then priority order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Exemplar)> {
        self.per_class.iter().flat_map(|(&c, list)| list.iter().map(move |e| (c, e)))
    }

    /// `(class, rank, sample id)` rows for auditing.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.per_class
            .iter()
            .flat_map(|(&c, list)| list.iter().enumerate().map(move |(r, e)| (c, r, e.id)))
    }

    /// End-of-task update: reduce the old classes to the new quota, herd the
    /// new classes, then trim the largest classes (highest index first) until
    /// the capacity holds.
    ///
    /// `extract` maps a batch of raw inputs to the features herding works in.
    pub fn rebalance<E>(
        &mut self,
        new_classes: &BTreeMap<usize, Vec<Sample>>,
        mut extract: E,
    ) -> Result<RebalanceReport>
    where
        E: FnMut(&Matrix) -> Result<Matrix>,
    {
        let mut observed: Vec<usize> = self.per_class.keys().copied().collect();
        for &c in new_classes.keys() {
            if self.per_class.contains_key(&c) {
                return Err(Error::Contract(alloc::format!("class {c} is already in the buffer")));
            }
            observed.push(c);
        }
        let quota = per_class_quota(self.capacity, observed.len());
        for list in self.per_class.values_mut() {
            list.truncate(quota);
        }
        for (&c, samples) in new_classes {
            if samples.is_empty() {
                warn!("class {c} has no labeled samples; it gets no exemplars");
                self.per_class.insert(c, Vec::new());
                continue;
            }
            let dim = samples[0].features.len();
            let x = crate::stream::features_matrix(samples, dim);
            let feats = extract(&x)?;
            let set = construct_exemplar_set(samples, &feats, quota)?;
            self.per_class.insert(c, set);
        }
        let mut trimmed = 0;
        while self.len() > self.capacity {
            let (&c, _) = self
                .per_class
                .iter()
                // last maximum wins, i.e. the highest class index
                .max_by_key(|(_, l)| l.len())
                .expect("non-empty when over capacity");
            self.per_class.get_mut(&c).expect("present").pop();
            trimmed += 1;
        }
        Ok(RebalanceReport { quota, observed_classes: observed.len(), trimmed })
    }

    /// Stacks all exemplar inputs (class order) with their labels.
    pub fn as_matrix(&self, dim: usize) -> (Matrix, Vec<usize>, Vec<u64>) {
        let mut data = Vec::with_capacity(self.len() * dim);
        let mut labels = Vec::with_capacity(self.len());
        let mut ids = Vec::with_capacity(self.len());
        for (c, e) in self.iter() {
            data.extend_from_slice(&e.features);
            labels.push(c);
            ids.push(e.id);
        }
        (Matrix::new(labels.len(), dim, data).expect("uniform width"), labels, ids)
    }
}

/// Per-class means of unit projection features over the buffer, renormalised.
/// Empty or degenerate classes are excluded and listed in the report.
pub fn class_means_from_buffer<P>(buffer: &ExemplarBuffer, mut project: P) -> Result<MeanReport>
where
    P: FnMut(&Matrix) -> Result<Normalized>,
{
    let mut groups = Vec::new();
    let mut empty = Vec::new();
    for (&c, list) in buffer.per_class() {
        if list.is_empty() {
            warn!("class {c} has no exemplars; excluded from nearest-mean scoring");
            empty.push(c);
            continue;
        }
        let dim = list[0].features.len();
        let mut data = Vec::with_capacity(list.len() * dim);
        for e in list {
            data.extend_from_slice(&e.features);
        }
        let x = Matrix::new(list.len(), dim, data)?;
        groups.push((c, project(&x)?.out));
    }
    let mut report = class_means_from_groups(groups)?;
    report.empty.extend(empty);
    report.empty.sort_unstable();
    Ok(report)
}
