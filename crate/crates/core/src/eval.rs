//! Test-time prediction, incremental accuracy bookkeeping and pseudo-label
//! diagnostics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::losses::{ncm_label, route_batch, ClassMeanTable, PseudoStrategy};
use crate::model::ModelState;
use crate::numkit::{softmax_in_place, Matrix};

/// Number of uniform confidence bins on `[0, 1]`.
pub const CONFIDENCE_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TestStrategy {
    #[default]
    #[serde(rename = "dcp")]
    Dcp,
    #[serde(rename = "t-cls")]
    ClassifierOnly,
    #[serde(rename = "t-ncm")]
    NcmOnly,
}

impl TestStrategy {
    pub const ALL: [TestStrategy; 3] = [TestStrategy::Dcp, TestStrategy::ClassifierOnly, TestStrategy::NcmOnly];

    pub fn name(self) -> &'static str {
        match self {
            TestStrategy::Dcp => "dcp",
            TestStrategy::ClassifierOnly => "t-cls",
            TestStrategy::NcmOnly => "t-ncm",
        }
    }
}

impl core::str::FromStr for TestStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param("test_strategy", format!("unknown strategy `{s}` (dcp, t-cls, t-ncm)")))
    }
}

/// Classifier argmax and its softmax probability for each row.
fn classifier_votes(logits: &Matrix) -> Vec<(usize, f64)> {
    let mut p = vec![0.0; logits.cols()];
    (0..logits.rows())
        .map(|r| {
            p.copy_from_slice(logits.row(r));
            softmax_in_place(&mut p, 1.0);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, &v) in p.iter().enumerate() {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best
        })
        .collect()
}

/// Predicts labels for a test batch.
///
/// Under `dcp` a sample keeps the classifier label when its confidence
/// reaches `tau` and otherwise takes the nearest exemplar mean. Samples the
/// NCM branch cannot score (degenerate feature, empty table) fall back to
/// the classifier.
pub fn dcp_predict(
    x: &Matrix,
    model: &ModelState,
    means: Option<&ClassMeanTable>,
    tau: f64,
    strategy: TestStrategy,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(param("tau", "confidence threshold must lie in [0, 1]"));
    }
    let fwd = model.forward(x)?;
    let votes = classifier_votes(&fwd.logits);
    if strategy != TestStrategy::ClassifierOnly {
        match means {
            None => warn!("no exemplar means available; predicting with the classifier"),
            Some(t) if t.len() < model.observed_classes() => {
                let missing = model.observed_classes() - t.len();
                warn!("exemplar means miss {missing} observed classes; they cannot be NCM predictions");
            }
            _ => {}
        }
    }
    Ok(votes
        .iter()
        .enumerate()
        .map(|(r, &(cls, conf))| {
            let use_ncm = match strategy {
                TestStrategy::ClassifierOnly => false,
                TestStrategy::NcmOnly => true,
                TestStrategy::Dcp => conf < tau,
            };
            if use_ncm {
                means.and_then(|t| ncm_label(fwd.f().row(r), t)).unwrap_or(cls)
            } else {
                cls
            }
        })
        .collect())
}

/// `a[t][i]`, accuracy on task `i`'s test set after training task `t`
/// (both zero-based here).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rows may be ragged; [`incremental_metrics`] rejects incomplete ones.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, row) in rows.iter().enumerate() {
            if row.len() > t + 1 {
                return Err(Error::Contract(format!("row {t} has entries beyond the diagonal")));
            }
            check_entries(row)?;
        }
        Ok(Self { rows })
    }

    /// Appends the row for the next task; it must cover every task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Dimension {
                op: "AccuracyMatrix::push_row",
                expected: (1, self.rows.len() + 1),
                found: (1, row.len()),
            });
        }
        check_entries(&row)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    /// `(t, i, acc)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(t, r)| r.iter().enumerate().map(move |(i, &a)| (t, i, a)))
    }
}

fn check_entries(row: &[f64]) -> Result<()> {
    match row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        Some(a) => Err(Error::Contract(format!("accuracy {a} outside [0, 1]"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalMetrics {
    /// `A_t`, the mean accuracy over tasks seen after task `t`.
    pub per_task: Vec<f64>,
    pub a_avg: f64,
    pub a_last: f64,
}

pub fn incremental_metrics(matrix: &AccuracyMatrix) -> Result<IncrementalMetrics> {
    if matrix.rows.is_empty() {
        return Err(Error::Contract("accuracy matrix is empty".into()));
    }
    let mut per_task = Vec::with_capacity(matrix.rows.len());
    for (t, row) in matrix.rows.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::Contract(format!("accuracy row {t} has {} of {} entries", row.len(), t + 1)));
        }
        per_task.push(row.iter().sum::<f64>() / row.len() as f64);
    }
    let a_avg = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let a_last = *per_task.last().expect("nonempty");
    Ok(IncrementalMetrics { per_task, a_avg, a_last })
}

/// Per-class `(correct, total)` counts.
pub type ClassTally = BTreeMap<usize, (usize, usize)>;

pub fn class_tally(predicted: &[usize], truth: &[usize]) -> Result<ClassTally> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension { op: "class_tally", expected: (truth.len(), 1), found: (predicted.len(), 1) });
    }
    let mut tally = ClassTally::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        let e = tally.entry(t).or_insert((0, 0));
        e.0 += usize::from(p == t);
        e.1 += 1;
    }
    Ok(tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseNovel {
    pub base: f64,
    /// `None` while only base classes have been observed.
    pub novel: Option<f64>,
}

/// Splits each task's per-class results into base and novel accuracy.
pub fn base_novel_accuracy(per_task: &[ClassTally], base: &BTreeSet<usize>) -> Result<Vec<BaseNovel>> {
    per_task
        .iter()
        .enumerate()
        .map(|(t, tally)| {
            if let Some(c) = base.iter().find(|c| !tally.contains_key(c)) {
                return Err(Error::Contract(format!("base class {c} not observed by task {t}")));
            }
            let (mut b, mut n) = ((0usize, 0usize), (0usize, 0usize));
            for (class, &(correct, total)) in tally {
                let slot = if base.contains(class) { &mut b } else { &mut n };
                slot.0 += correct;
                slot.1 += total;
            }
            let ratio = |(c, t): (usize, usize)| if t == 0 { 0.0 } else { c as f64 / t as f64 };
            Ok(BaseNovel { base: ratio(b), novel: (n.1 > 0).then(|| ratio(n)) })
        })
        .collect()
}

/// Confidence histogram and accuracy of one labelling strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyDiagnostics {
    pub strategy: &'static str,
    pub scored: usize,
    pub correct: usize,
    pub low_conf_scored: usize,
    pub low_conf_correct: usize,
    /// `(correct, incorrect)` per confidence bin.
    pub bins: Vec<(usize, usize)>,
}

impl StrategyDiagnostics {
    fn new(strategy: &'static str) -> Self {
        Self {
            strategy,
            scored: 0,
            correct: 0,
            low_conf_scored: 0,
            low_conf_correct: 0,
            bins: vec![(0, 0); CONFIDENCE_BINS],
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.correct as f64 / self.scored as f64)
    }

    pub fn low_conf_accuracy(&self) -> Option<f64> {
        (self.low_conf_scored > 0).then(|| self.low_conf_correct as f64 / self.low_conf_scored as f64)
    }
}

pub fn confidence_bin(confidence: f64) -> usize {
    let b = libm::floor(confidence * CONFIDENCE_BINS as f64);
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(CONFIDENCE_BINS - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoDiagnostics {
    pub task: usize,
    pub epoch: usize,
    pub tau: f64,
    /// Unthresholded classifier labels, NCM labels, then DCP.
    pub strategies: Vec<StrategyDiagnostics>,
}

impl PseudoDiagnostics {
    pub fn get(&self, strategy: &str) -> Option<&StrategyDiagnostics> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

/// Scores the pseudo-labels each strategy would assign to `x` against the
/// hidden ground truth. Samples without an NCM label (degenerate feature)
/// count as incorrect for the NCM-based strategies.
pub fn pseudo_diagnostics(
    x: &Matrix,
    truth: &[usize],
    model: &ModelState,
    table: &ClassMeanTable,
    tau: f64,
    task: usize,
    epoch: usize,
) -> Result<PseudoDiagnostics> {
    if truth.len() != x.rows() {
        return Err(Error::Dimension { op: "pseudo_diagnostics", expected: (x.rows(), 1), found: (truth.len(), 1) });
    }
    let fwd = model.forward(x)?;
    let cls = route_batch(&fwd.logits, fwd.f(), Some(table), 0.0, PseudoStrategy::ClassifierOnly)?;
    let ncm = route_batch(&fwd.logits, fwd.f(), Some(table), tau, PseudoStrategy::NcmOnly)?;
    let dcp = route_batch(&fwd.logits, fwd.f(), Some(table), tau, PseudoStrategy::Dcp)?;
    let mut strategies = Vec::with_capacity(3);
    for (name, batch) in [("p-cls", &cls), ("p-ncm", &ncm), ("dcp", &dcp)] {
        let mut d = StrategyDiagnostics::new(name);
        for (pl, &t) in batch.labels.iter().zip(truth) {
            let ok = pl.label == Some(t);
            d.scored += 1;
            d.correct += usize::from(ok);
            if pl.confidence < tau {
                d.low_conf_scored += 1;
                d.low_conf_correct += usize::from(ok);
            }
            let bin = &mut d.bins[confidence_bin(pl.confidence)];
            if ok {
                bin.0 += 1;
            } else {
                bin.1 += 1;
            }
        }
        strategies.push(d);
    }
    Ok(PseudoDiagnostics { task, epoch, tau, strategies })
}
