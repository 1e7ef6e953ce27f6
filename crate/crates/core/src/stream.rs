//! Synthetic class-incremental task streams over vector data.
//!
//! Each class is an isotropic Gaussian cluster whose mean sits on a sphere of
//! radius `class_separation`. Tasks own disjoint, contiguous class ranges:
//! task `t` (1-based) holds classes `(t-1)*c .. t*c`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{norm, Matrix};
use crate::rng::{gaussian, rng_for};

/// One input vector. Unlabeled samples carry `label: None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Standard,
    /// Long-tailed labeled/unlabeled counts, cycled over the classes of a task.
    Imbalanced,
    /// Training-set size varies per task.
    Inconsistent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Imbalanced => "imbalanced",
            Variant::Inconsistent => "inconsistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub labels_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub variant: Variant,
    /// Imbalanced variant: labeled counts cycled per class (default `[X, 5X]`).
    pub imbalanced_labeled: Vec<usize>,
    /// Imbalanced variant: unlabeled counts cycled per class (default `[U, 5U]`).
    pub imbalanced_unlabeled: Vec<usize>,
    /// Inconsistent variant: total training samples (labeled + unlabeled) per task.
    pub task_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            labels_per_class: 30,
            unlabeled_per_class: 600,
            test_per_class: 200,
            input_dim: 20,
            class_separation: 4.0,
            noise_scale: 1.0,
            variant: Variant::Standard,
            imbalanced_labeled: Vec::new(),
            imbalanced_unlabeled: Vec::new(),
            task_sizes: Vec::new(),
            seed: 0,
        }
    }
}

/// Per-class sample counts for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ClassCounts {
    labeled: usize,
    unlabeled: usize,
}

impl StreamConfig {
    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_tasks == 0 {
            return fail("num_tasks must be at least 1");
        }
        if self.classes_per_task == 0 {
            return fail("classes_per_task must be at least 1");
        }
        if self.input_dim == 0 {
            return fail("input_dim must be at least 1");
        }
        if self.labels_per_class == 0 {
            return fail("labels_per_class must be at least 1");
        }
        if self.test_per_class == 0 {
            return fail("test_per_class must be at least 1");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return fail("class_separation must be finite and non-negative");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail("noise_scale must be finite and non-negative");
        }
        match self.variant {
            Variant::Standard => {}
            Variant::Imbalanced => {
                if self.imbalanced_labeled.contains(&0) {
                    return fail("imbalanced_labeled entries must be at least 1");
                }
            }
            Variant::Inconsistent => {
                if self.task_sizes.len() != self.num_tasks {
                    return Err(Error::Config(format!(
                        "task_sizes lists {} tasks but num_tasks is {}",
                        self.task_sizes.len(),
                        self.num_tasks
                    )));
                }
                if self.task_sizes.iter().any(|&s| s < self.classes_per_task) {
                    return fail("every task size must give each class at least one sample");
                }
            }
        }
        Ok(())
    }

    fn counts(&self, task_index: usize, class_offset: usize) -> ClassCounts {
        match self.variant {
            Variant::Standard => ClassCounts {
                labeled: self.labels_per_class,
                unlabeled: self.unlabeled_per_class,
            },
            Variant::Imbalanced => {
                let lab = if self.imbalanced_labeled.is_empty() {
                    vec![self.labels_per_class, 5 * self.labels_per_class]
                } else {
                    self.imbalanced_labeled.clone()
                };
                let unl = if self.imbalanced_unlabeled.is_empty() {
                    vec![self.unlabeled_per_class, 5 * self.unlabeled_per_class]
                } else {
                    self.imbalanced_unlabeled.clone()
                };
                ClassCounts {
                    labeled: lab[class_offset % lab.len()],
                    unlabeled: unl[class_offset % unl.len()],
                }
            }
            Variant::Inconsistent => {
                let size = self.task_sizes[task_index];
                let c = self.classes_per_task;
                let total = size / c + usize::from(class_offset < size % c);
                let labeled = self.labels_per_class.min(total);
                ClassCounts { labeled, unlabeled: total - labeled }
            }
        }
    }
}

/// One task of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based.
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub labeled: Vec<Sample>,
    /// Label-stripped unlabeled samples.
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Ground truth of `unlabeled`, index-aligned. Diagnostics only.
    unlabeled_truth: Vec<usize>,
}

impl TaskSpec {
    pub fn new(
        task_id: usize,
        classes: Vec<usize>,
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
        test: Vec<Sample>,
        unlabeled_truth: Vec<usize>,
    ) -> Result<Self> {
        if unlabeled_truth.len() != unlabeled.len() && !unlabeled_truth.is_empty() {
            return Err(Error::Contract(format!(
                "task {task_id}: {} truth labels for {} unlabeled samples",
                unlabeled_truth.len(),
                unlabeled.len()
            )));
        }
        if unlabeled.iter().any(|s| s.label.is_some()) {
            return Err(Error::Contract(format!("task {task_id}: unlabeled sample carries a label")));
        }
        for s in labeled.iter().chain(&test) {
            match s.label {
                Some(l) if classes.contains(&l) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "task {task_id}: sample {} has label {:?} outside the task classes",
                        s.id, s.label
                    )))
                }
            }
        }
        Ok(Self { task_id, classes, labeled, unlabeled, test, unlabeled_truth })
    }

    /// What the trainer is allowed to see.
    pub fn training_view(&self) -> TaskView<'_> {
        TaskView {
            task_id: self.task_id,
            classes: &self.classes,
            labeled: &self.labeled,
            unlabeled: &self.unlabeled,
        }
    }

    /// Hidden ground truth of the unlabeled split, if it was retained.
    pub fn unlabeled_truth(&self) -> Option<&[usize]> {
        if self.unlabeled_truth.is_empty() && !self.unlabeled.is_empty() {
            None
        } else {
            Some(&self.unlabeled_truth)
        }
    }

    pub fn train_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Label-stripped, test-free view of a task handed to the trainer.
#[derive(Debug, Clone, Copy)]
pub struct TaskView<'a> {
    pub task_id: usize,
    pub classes: &'a [usize],
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }
}

pub fn generate_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let d = config.input_dim;
    let mut mean_rng = rng_for(config.seed, "class-means", 0);
    let means: Vec<Vec<f64>> = (0..config.total_classes())
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut mean_rng)).collect();
            let n = norm(&v).max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= config.class_separation / n);
            v
        })
        .collect();

    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(config.num_tasks);
    for t in 0..config.num_tasks {
        let mut rng = rng_for(config.seed, "task", t as u64);
        let classes: Vec<usize> =
            (t * config.classes_per_task..(t + 1) * config.classes_per_task).collect();
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut truth = Vec::new();
        let mut test = Vec::new();
        for (offset, &class) in classes.iter().enumerate() {
            let counts = config.counts(t, offset);
            let mut pool: Vec<Vec<f64>> = (0..counts.labeled + counts.unlabeled)
                .map(|_| draw(&means[class], config.noise_scale, &mut rng))
                .collect();
            pool.shuffle(&mut rng);
            for (i, features) in pool.into_iter().enumerate() {
                let id = next_id;
                next_id += 1;
                if i < counts.labeled {
                    labeled.push(Sample { id, features, label: Some(class) });
                } else {
                    unlabeled.push(Sample { id, features, label: None });
                    truth.push(class);
                }
            }
            for _ in 0..config.test_per_class {
                let features = draw(&means[class], config.noise_scale, &mut rng);
                test.push(Sample { id: next_id, features, label: Some(class) });
                next_id += 1;
            }
        }
        tasks.push(TaskSpec::new(t + 1, classes, labeled, unlabeled, test, truth)?);
    }
    Ok(TaskStream { config: config.clone(), tasks })
}

fn draw<R: Rng + ?Sized>(mean: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    mean.iter().map(|m| m + noise * gaussian(rng)).collect()
}

/// Stacks sample features into a `n x d` matrix.
pub fn features_matrix<'a>(samples: impl IntoIterator<Item = &'a Sample>, dim: usize) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        debug_assert_eq!(s.features.len(), dim);
        data.extend_from_slice(&s.features);
        rows += 1;
    }
    Matrix::new(rows, dim, data).expect("feature width checked at generation")
}

/// Vector-space stand-ins for image augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub drop_prob: f64,
    /// Global scale is drawn uniformly from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { weak_sigma: 0.05, strong_sigma: 0.2, drop_prob: 0.1, scale_jitter: 0.1 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.strong_sigma >= 0.0 && self.scale_jitter >= 0.0) {
            return Err(Error::Config("augmentation scales must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config("drop_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `x + N(0, sigma^2 I)`.
pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v + sigma * gaussian(rng)).collect()
}

/// Larger Gaussian noise, then coordinate dropout, then a global rescale.
pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let scale = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    x.iter()
        .map(|&v| {
            let noisy = if cfg.strong_sigma > 0.0 { v + cfg.strong_sigma * gaussian(rng) } else { v };
            let dropped = cfg.drop_prob > 0.0 && rng.random::<f64>() < cfg.drop_prob;
            if dropped {
                0.0
            } else {
                noisy * scale
            }
        })
        .collect()
}

/// Applies `weak_augment` to every row.
pub fn weak_augment_matrix<R: Rng + ?Sized>(x: &Matrix, sigma: f64, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    if sigma != 0.0 {
        for v in out.data_mut() {
            *v += sigma * gaussian(rng);
        }
    }
    out
}

/// Applies `strong_augment` to every row.
pub fn strong_augment_matrix<R: Rng + ?Sized>(x: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = strong_augment(x.row(r), cfg, rng);
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}
