//! Task-by-task training: batching, SGD with momentum, the warmup/cosine
//! schedule, teacher snapshots, classifier growth and exemplar rebalancing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::{build_etf, EtfFrame};
use crate::eval::{
    class_tally, dcp_predict, incremental_metrics, AccuracyMatrix, ClassTally, IncrementalMetrics, TestStrategy,
};
use crate::exemplar::{class_means_from_buffer, ExemplarBuffer, RebalanceReport};
use crate::losses::{
    class_means_labeled, route_batch, total_loss_with_weak, ClassMeanTable, LossBreakdown, LossSettings,
    LossWeights, PseudoStrategy, StepBatch,
};
use crate::model::{Gradients, ModelConfig, ModelState, TeacherSnapshot};
use crate::numkit::Matrix;
use crate::rng::{rng_for, sub_seed, LabRng};
use crate::stream::{features_matrix, strong_augment_matrix, weak_augment_matrix, AugmentConfig, Sample, TaskStream, TaskView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Labeled (and exemplar) batch size.
    pub batch_size: usize,
    /// Unlabeled batch = `batch_size * mu_ratio`.
    pub mu_ratio: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before each step; 0 disables it.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub tau: f64,
    pub seed: u64,
    /// Exemplar memory size.
    pub memory: usize,
    pub hidden: Vec<usize>,
    pub proj_dim: usize,
    pub augment: AugmentConfig,
    pub disable_fsr: bool,
    pub disable_cud: bool,
    pub pseudo_strategy: PseudoStrategy,
    pub test_strategy: TestStrategy,
    pub replay: Replay,
}


/// How exemplars enter the supervised term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Replay {
    /// Labeled batches are drawn from the task's labeled data and the buffer.
    #[default]
    Pool,
    /// Each step's exemplar batch is appended to the labeled batch.
    Paired,
    /// Exemplars are used for distillation only.
    Off,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 16,
            mu_ratio: 7,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-5,
            grad_clip: 5.0,
            weights: LossWeights::default(),
            beta: 0.1,
            gamma: 0.1,
            xi: 0.1,
            tau: 0.95,
            seed: 0,
            memory: 200,
            hidden: vec![64, 64],
            proj_dim: 32,
            augment: AugmentConfig::default(),
            disable_fsr: false,
            disable_cud: false,
            pseudo_strategy: PseudoStrategy::Dcp,
            test_strategy: TestStrategy::Dcp,
            replay: Replay::Pool,
        }
    }
}

impl TrainConfig {
    /// The baseline learner: no FSR, no CUD, thresholded classifier pseudo-labels.
    pub fn baseline() -> Self {
        Self {
            disable_fsr: true,
            disable_cud: true,
            pseudo_strategy: PseudoStrategy::ClassifierOnly,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie strictly between 0 and 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if self.batch_size == 0 || self.mu_ratio == 0 {
            return bad("batch_size and mu_ratio must be positive");
        }
        if !(self.beta > 0.0 && self.gamma > 0.0 && self.xi > 0.0) {
            return bad("temperatures must be positive");
        }
        let w = self.weights;
        if [w.uns, w.cl, w.fsr, w.cud].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.memory == 0 {
            return bad("memory must be positive");
        }
        self.augment.validate()?;
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            beta: self.beta,
            gamma: self.gamma,
            xi: self.xi,
            use_fsr: !self.disable_fsr,
            use_cud: !self.disable_cud,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig { input_dim, hidden: self.hidden.clone(), proj_dim: self.proj_dim, projector_bias: true }
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.batch_size * self.mu_ratio
    }
}

/// Learning rate for a 0-based epoch: linear warmup `(e+1)/w * lr`, then a
/// cosine decay that reaches zero on the final epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let (w, n) = (config.warmup_epochs, config.epochs);
    if epoch < w {
        return (epoch + 1) as f64 / w as f64 * config.lr;
    }
    let span = n.saturating_sub(1).saturating_sub(w);
    let progress = if span == 0 { 0.0 } else { (epoch - w).min(span) as f64 / span as f64 };
    config.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Momentum buffers aligned with [`ModelState::parameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    buffers: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(model: &ModelState) -> Self {
        Self { buffers: model.parameters().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect() }
    }

    pub fn from_buffers(buffers: Vec<Matrix>) -> Self {
        Self { buffers }
    }

    pub fn buffers(&self) -> &[Matrix] {
        &self.buffers
    }

    /// Widens buffers after classifier growth; the new columns start at zero.
    pub fn sync(&mut self, model: &ModelState) -> Result<()> {
        let params = model.parameters();
        if params.len() != self.buffers.len() {
            return Err(Error::Contract("optimizer state and model disagree on parameter count".into()));
        }
        for (buf, p) in self.buffers.iter_mut().zip(params) {
            if buf.shape() == p.shape() {
                continue;
            }
            if buf.rows() != p.rows() || buf.cols() > p.cols() {
                return Err(Error::Dimension { op: "OptimizerState::sync", expected: p.shape(), found: buf.shape() });
            }
            *buf = buf.hstack(&Matrix::zeros(p.rows(), p.cols() - buf.cols()))?;
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let total = libm::sqrt(grads.tensors().iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>());
    if max_norm > 0.0 && total > max_norm {
        let s = max_norm / total;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}

/// `v <- momentum * v + grad + wd * param; param <- param - lr * v`.
pub fn sgd_step(
    model: &mut ModelState,
    grads: &Gradients,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params = model.parameters_mut();
    if params.len() != grads.tensors().len() || params.len() != opt.buffers.len() {
        return Err(Error::Contract("gradient, optimizer and parameter counts differ".into()));
    }
    for ((p, g), v) in params.iter_mut().zip(grads.tensors()).zip(opt.buffers.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Dimension { op: "sgd_step", expected: p.shape(), found: g.shape() });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads.tensors()).zip(opt.buffers.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Which split a training batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Labeled,
    Unlabeled,
    Exemplar,
}

/// State handed to observers at the end of every epoch.
pub struct EpochContext<'a> {
    pub task_id: usize,
    pub epoch: usize,
    pub model: &'a ModelState,
    /// Class means of the current task used during the epoch, if any.
    pub table: Option<&'a ClassMeanTable>,
    pub config: &'a TrainConfig,
    pub losses: &'a LossRecord,
}

/// State handed to observers once a task is finished and evaluated.
pub struct TaskEndContext<'a> {
    pub task_id: usize,
    pub model: &'a ModelState,
    pub optimizer: &'a OptimizerState,
    pub buffer: &'a ExemplarBuffer,
    pub accuracy: &'a [f64],
}

/// Hooks into a run. Observers may hold data the trainer must not see,
/// such as the ground truth of unlabeled samples.
pub trait TrainObserver {
    fn on_access(&mut self, _task_id: usize, _kind: Access, _ids: &[u64]) {}

    fn epoch_end(&mut self, _ctx: &EpochContext<'_>) -> Result<()> {
        Ok(())
    }

    fn task_end(&mut self, _ctx: &TaskEndContext<'_>) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Step-averaged losses of one epoch; confidence counts are summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub losses: Vec<LossRecord>,
    pub rebalance: RebalanceReport,
    pub teacher: TeacherSnapshot,
}

/// Mutable learner state carried from task to task.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: ModelState,
    pub optimizer: OptimizerState,
    pub buffer: ExemplarBuffer,
    pub frame: EtfFrame,
    pub teacher: Option<TeacherSnapshot>,
}

impl Learner {
    /// Fresh learner for a stream with `total_classes` classes.
    pub fn new(config: &TrainConfig, input_dim: usize, total_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = ModelState::new(config.model_config(input_dim), sub_seed(config.seed, "model", 0))?;
        let frame = build_etf(total_classes, config.proj_dim, sub_seed(config.seed, "etf", 0))?;
        Ok(Self {
            optimizer: OptimizerState::new(&model),
            model,
            buffer: ExemplarBuffer::new(config.memory),
            frame,
            teacher: None,
        })
    }
}

/// Cycles through a shuffled index list, reshuffling after every pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut LabRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut LabRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_task(view: &TaskView<'_>, learner: &Learner) -> Result<()> {
    let k = learner.model.observed_classes();
    if view.classes.is_empty() {
        return Err(Error::Contract(format!("task {} has no classes", view.task_id)));
    }
    let contiguous = view.classes.iter().enumerate().all(|(j, &c)| c == k + j);
    if !contiguous {
        return Err(Error::Contract(format!(
            "task {} classes {:?} are not the next unobserved classes starting at {k}",
            view.task_id, view.classes
        )));
    }
    if k + view.classes.len() > learner.frame.num_classes() {
        return Err(Error::Contract("task classes exceed the ETF label space".into()));
    }
    if view.labeled.is_empty() || view.unlabeled.is_empty() {
        return Err(Error::Contract(format!("task {} needs labeled and unlabeled data", view.task_id)));
    }
    Ok(())
}

/// Trains one task in place and returns its loss log.
pub fn train_task(
    view: TaskView<'_>,
    learner: &mut Learner,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TaskOutcome> {
    config.validate()?;
    check_task(&view, learner)?;
    let t = view.task_id as u64;
    let dim = learner.model.input_dim();

    learner.model.expand_classifier(view.classes.len(), &mut rng_for(config.seed, "expand", t))?;
    learner.optimizer.sync(&learner.model)?;
    let teacher = learner.teacher.clone();
    let settings = config.loss_settings();

    let (x_e, y_e, ids_e) = learner.buffer.as_matrix(dim);
    let use_exemplars = teacher.is_some() && x_e.rows() > 0;
    // Under `Pool` the supervised pool holds the task's labeled data followed
    // by the exemplars; indices past `n_l` are exemplars.
    let n_l = view.labeled.len();
    let mut x_l = features_matrix(view.labeled, dim);
    let mut y_l: Vec<usize> = view.labeled.iter().map(|s| s.label.expect("labeled")).collect();
    let mut ids_l: Vec<u64> = view.labeled.iter().map(|s| s.id).collect();
    if use_exemplars && config.replay == Replay::Pool {
        x_l = x_l.vstack(&x_e)?;
        y_l.extend_from_slice(&y_e);
        ids_l.extend_from_slice(&ids_e);
    }
    let x_u = features_matrix(view.unlabeled, dim);
    let ids_u: Vec<u64> = view.unlabeled.iter().map(|s| s.id).collect();

    let mut batch_rng = rng_for(config.seed, "batches", t);
    let mut aug_rng = rng_for(config.seed, "augment", t);
    let ub = config.unlabeled_batch();
    let steps = x_u.rows().div_ceil(ub);
    let needs_table = config.pseudo_strategy.needs_means() || (teacher.is_some() && !config.disable_cud);
    let mut labeled_cycle = Cycler::new(x_l.rows(), &mut batch_rng);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let table = if needs_table {
            let report = class_means_labeled(view.labeled, view.classes, &learner.model)?;
            if !report.degenerate.is_empty() {
                debug!("task {t} epoch {epoch}: degenerate class means {:?}", report.degenerate);
            }
            Some(report.table)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..x_u.rows()).collect();
        order.shuffle(&mut batch_rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(ub) {
            let li = labeled_cycle.take(config.batch_size, &mut batch_rng);
            let (fresh, replayed): (Vec<usize>, Vec<usize>) = li.iter().partition(|&&i| i < n_l);
            observer.on_access(view.task_id, Access::Labeled, &pick(&ids_l, &fresh));
            if !replayed.is_empty() {
                observer.on_access(view.task_id, Access::Exemplar, &pick(&ids_l, &replayed));
            }
            observer.on_access(view.task_id, Access::Unlabeled, &pick(&ids_u, chunk));
            let mut labeled_x = weak_augment_matrix(&x_l.select_rows(&li), config.augment.weak_sigma, &mut aug_rng);
            let mut labels: Vec<usize> = li.iter().map(|&i| y_l[i]).collect();
            let raw_u = x_u.select_rows(chunk);
            let weak_x = weak_augment_matrix(&raw_u, config.augment.weak_sigma, &mut aug_rng);
            let strong_x = strong_augment_matrix(&raw_u, &config.augment, &mut aug_rng);
            let exemplar_x = if use_exemplars {
                let ei: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.random_range(0..x_e.rows())).collect();
                observer.on_access(view.task_id, Access::Exemplar, &pick(&ids_e, &ei));
                let ex = weak_augment_matrix(&x_e.select_rows(&ei), config.augment.weak_sigma, &mut aug_rng);
                if config.replay == Replay::Paired {
                    labeled_x = labeled_x.vstack(&ex)?;
                    labels.extend(ei.iter().map(|&i| y_e[i]));
                }
                Some(ex)
            } else {
                None
            };

            // pseudo-labels come from a plain forward pass: no gradient path
            let weak = learner.model.forward(&weak_x)?;
            let routing = route_batch(&weak.logits, weak.f(), table.as_ref(), config.tau, config.pseudo_strategy)?;
            let batch = StepBatch {
                labeled_x: &labeled_x,
                labels: &labels,
                weak_x: &weak_x,
                strong_x: &strong_x,
                exemplar_x: exemplar_x.as_ref(),
            };
            let (losses, grads) = total_loss_with_weak(
                &learner.model,
                teacher.as_ref(),
                &batch,
                weak,
                &routing,
                table.as_ref(),
                &learner.frame,
                &settings,
            )?;
            let mut grads = grads;
            clip_grad_norm(&mut grads, config.grad_clip);
            sgd_step(&mut learner.model, &grads, &mut learner.optimizer, lr, config.momentum, config.weight_decay)?;
            accumulate(&mut acc, &losses);
        }
        let n = steps.max(1) as f64;
        for v in [&mut acc.sup, &mut acc.uns, &mut acc.cl, &mut acc.fsr, &mut acc.cud, &mut acc.total] {
            *v /= n;
        }
        let record = LossRecord { task: view.task_id, epoch, lr, losses: acc };
        observer.epoch_end(&EpochContext {
            task_id: view.task_id,
            epoch,
            model: &learner.model,
            table: table.as_ref(),
            config,
            losses: &record,
        })?;
        log.push(record);
    }

    let mut groups: BTreeMap<usize, Vec<Sample>> = view.classes.iter().map(|&c| (c, Vec::new())).collect();
    for s in view.labeled {
        groups.get_mut(&s.label.expect("labeled")).expect("task class").push(s.clone());
    }
    let model = &learner.model;
    let rebalance = learner.buffer.rebalance(&groups, |x| Ok(model.forward_projection(x)?.out))?;
    let snapshot = learner.model.snapshot(view.task_id);
    learner.teacher = Some(snapshot.clone());
    info!(
        "task {t}: final total loss {:.4}, buffer {} / {}",
        log.last().map_or(0.0, |r| r.losses.total),
        learner.buffer.len(),
        learner.buffer.capacity()
    );
    Ok(TaskOutcome { losses: log, rebalance, teacher: snapshot })
}

fn pick(ids: &[u64], idx: &[usize]) -> Vec<u64> {
    idx.iter().map(|&i| ids[i]).collect()
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.sup += b.sup;
    acc.uns += b.uns;
    acc.cl += b.cl;
    acc.fsr += b.fsr;
    acc.cud += b.cud;
    acc.total += b.total;
    acc.high_conf += b.high_conf;
    acc.low_conf += b.low_conf;
}

/// Exemplar class means under the current model, for test-time NCM.
pub fn exemplar_means(learner: &Learner) -> Result<ClassMeanTable> {
    let model = &learner.model;
    Ok(class_means_from_buffer(&learner.buffer, |x| model.forward_projection(x))?.table)
}

/// Accuracy and per-class tallies on one labeled test set.
pub fn evaluate(
    learner: &Learner,
    means: Option<&ClassMeanTable>,
    test: &[Sample],
    config: &TrainConfig,
) -> Result<(f64, ClassTally)> {
    if test.is_empty() {
        return Ok((0.0, ClassTally::new()));
    }
    let x = features_matrix(test, learner.model.input_dim());
    let truth: Vec<usize> = test.iter().map(|s| s.label.expect("test samples are labeled")).collect();
    let pred = dcp_predict(&x, &learner.model, means, config.tau, config.test_strategy)?;
    let tally = class_tally(&pred, &truth)?;
    let correct: usize = tally.values().map(|v| v.0).sum();
    Ok((correct as f64 / truth.len() as f64, tally))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub task_classes: Vec<Vec<usize>>,
    pub accuracy: AccuracyMatrix,
    pub metrics: IncrementalMetrics,
    /// Per-class results over all seen test sets after each task.
    pub class_tallies: Vec<ClassTally>,
    pub losses: Vec<LossRecord>,
    pub buffer_sizes: Vec<usize>,
}

/// Trains every task in order and evaluates on all seen test sets after each.
pub fn run_stream(stream: &TaskStream, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<RunReport> {
    config.validate()?;
    let mut learner = Learner::new(config, stream.input_dim(), stream.total_classes())?;
    let mut accuracy = AccuracyMatrix::new();
    let mut class_tallies = Vec::new();
    let mut losses = Vec::new();
    let mut buffer_sizes = Vec::new();
    for task in &stream.tasks {
        let outcome = train_task(task.training_view(), &mut learner, config, observer)?;
        losses.extend(outcome.losses);
        buffer_sizes.push(learner.buffer.len());

        let means = exemplar_means(&learner)?;
        let mut row = Vec::new();
        let mut seen = ClassTally::new();
        for earlier in stream.tasks.iter().take_while(|s| s.task_id <= task.task_id) {
            let (acc, tally) = evaluate(&learner, Some(&means), &earlier.test, config)?;
            row.push(acc);
            seen.extend(tally);
        }
        info!("task {}: accuracy row {:?}", task.task_id, row);
        observer.task_end(&TaskEndContext {
            task_id: task.task_id,
            model: &learner.model,
            optimizer: &learner.optimizer,
            buffer: &learner.buffer,
            accuracy: &row,
        })?;
        accuracy.push_row(row)?;
        class_tallies.push(seen);
    }
    let metrics = incremental_metrics(&accuracy)?;
    Ok(RunReport {
        seed: config.seed,
        task_classes: stream.tasks.iter().map(|t| t.classes.clone()).collect(),
        accuracy,
        metrics,
        class_tallies,
        losses,
        buffer_sizes,
    })
}
