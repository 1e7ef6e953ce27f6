//! Loss terms of the USP objective and the divide-and-conquer labelling
//! machinery that feeds them.
//!
//! Every term is written as a kernel over forward outputs (logits or unit
//! projection features) that returns its value and upstream gradients. The
//! model-level wrappers run the forward pass, the kernel and backprop for a
//! single term; [`total_loss`] shares one forward/backward per batch across
//! all terms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::etf::EtfFrame;
use crate::model::{Forward, Gradients, ModelState, TeacherSnapshot};
use crate::numkit::{
    cosine_backward, cosine_similarity_matrix, dot, l2_normalize_rows, norm, softmax_in_place,
    softmax_kl_backward, safe_ln, Matrix, NORM_EPS,
};
use crate::stream::Sample;

/// Unit-norm class means in projection space, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanTable {
    classes: Vec<usize>,
    means: Matrix,
}

impl ClassMeanTable {
    pub fn new(classes: Vec<usize>, means: Matrix) -> Result<Self> {
        if classes.len() != means.rows() {
            return Err(Error::Dimension {
                op: "ClassMeanTable::new",
                expected: (classes.len(), means.cols()),
                found: means.shape(),
            });
        }
        for r in 0..means.rows() {
            if libm::fabs(norm(means.row(r)) - 1.0) > 1e-9 {
                return Err(Error::Contract(format!("mean of class {} is not unit norm", classes[r])));
            }
        }
        Ok(Self { classes, means })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

}

/// A mean table plus the classes that could not be placed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReport {
    pub table: ClassMeanTable,
    /// Classes whose summed features cancelled to (numerically) zero.
    pub degenerate: Vec<usize>,
    /// Classes with no samples.
    pub empty: Vec<usize>,
}

/// Averages each group of unit features and renormalises the result.
pub fn class_means_from_groups(groups: Vec<(usize, Matrix)>) -> Result<MeanReport> {
    let dim = groups.first().map_or(0, |(_, m)| m.cols());
    let mut classes = Vec::new();
    let mut data = Vec::new();
    let mut degenerate = Vec::new();
    let mut empty = Vec::new();
    for (class, feats) in groups {
        if feats.rows() == 0 {
            empty.push(class);
            continue;
        }
        if feats.cols() != dim {
            return Err(Error::Dimension {
                op: "class means",
                expected: (feats.rows(), dim),
                found: feats.shape(),
            });
        }
        let mut mean = feats.col_sums();
        let inv = 1.0 / feats.rows() as f64;
        mean.data_mut().iter_mut().for_each(|v| *v *= inv);
        let n = norm(mean.data());
        if n <= NORM_EPS {
            warn!("class {class} has a degenerate mean feature; excluded");
            degenerate.push(class);
            continue;
        }
        classes.push(class);
        data.extend(mean.data().iter().map(|v| v / n));
    }
    let means = Matrix::new(classes.len(), dim, data)?;
    Ok(MeanReport { table: ClassMeanTable { classes, means }, degenerate, empty })
}

/// Means of the current model's projection features over each class of a
/// labeled set. Every listed class must have at least one sample.
pub fn class_means_labeled(labeled: &[Sample], classes: &[usize], model: &ModelState) -> Result<MeanReport> {
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for s in labeled {
        if let Some(list) = s.label.and_then(|l| by_class.get_mut(&l)) {
            list.push(s);
        }
    }
    let mut groups = Vec::with_capacity(by_class.len());
    for (class, samples) in by_class {
        if samples.is_empty() {
            return Err(Error::Contract(format!("class {class} has no labeled samples")));
        }
        let x = crate::stream::features_matrix(samples, model.input_dim());
        groups.push((class, model.forward_projection(&x)?.out));
    }
    class_means_from_groups(groups)
}

/// Nearest class mean by cosine similarity; ties go to the lowest class.
/// `None` for a degenerate feature or an empty table.
pub fn ncm_label(f: &[f64], table: &ClassMeanTable) -> Option<usize> {
    let n = norm(f);
    if n <= NORM_EPS || table.is_empty() {
        return None;
    }
    let mut best: Option<(f64, usize)> = None;
    for (r, &class) in table.classes.iter().enumerate() {
        let s = dot(f, table.means.row(r)) / n;
        let better = match best {
            None => true,
            Some((bs, bc)) => s > bs || (s == bs && class < bc),
        };
        if better {
            best = Some((s, class));
        }
    }
    best.map(|(_, c)| c)
}

/// How unlabeled samples are assigned pseudo-labels during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PseudoStrategy {
    /// Confident samples take the classifier label, the rest the NCM label.
    #[default]
    #[serde(rename = "dcp")]
    Dcp,
    /// Classifier label above the threshold, nothing below it.
    #[serde(rename = "p-cls")]
    ClassifierOnly,
    /// NCM label for every sample.
    #[serde(rename = "p-ncm")]
    NcmOnly,
    /// Reversed routing: NCM above the threshold, classifier below.
    #[serde(rename = "p-r")]
    Reversed,
}

impl PseudoStrategy {
    pub const ALL: [PseudoStrategy; 4] =
        [PseudoStrategy::Dcp, PseudoStrategy::ClassifierOnly, PseudoStrategy::NcmOnly, PseudoStrategy::Reversed];

    pub fn name(self) -> &'static str {
        match self {
            PseudoStrategy::Dcp => "dcp",
            PseudoStrategy::ClassifierOnly => "p-cls",
            PseudoStrategy::NcmOnly => "p-ncm",
            PseudoStrategy::Reversed => "p-r",
        }
    }

    pub fn needs_means(self) -> bool {
        !matches!(self, PseudoStrategy::ClassifierOnly)
    }
}

impl core::str::FromStr for PseudoStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param("pseudo_strategy", format!("unknown strategy `{s}` (dcp, p-cls, p-ncm, p-r)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Classifier,
    Ncm,
    /// Excluded from the unsupervised loss.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Max softmax probability of the classifier on the weak view.
    pub confidence: f64,
    pub classifier_label: usize,
    pub ncm_label: Option<usize>,
    pub route: Route,
    pub label: Option<usize>,
}

impl PseudoLabel {
    pub fn is_confident(&self, tau: f64) -> bool {
        self.confidence >= tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub tau: f64,
    pub strategy: PseudoStrategy,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn high_confidence(&self) -> usize {
        self.labels.iter().filter(|l| l.is_confident(self.tau)).count()
    }

    pub fn low_confidence(&self) -> usize {
        self.len() - self.high_confidence()
    }

    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels.iter().map(|l| l.label).collect()
    }
}

/// Routes a batch given the weak view's logits and unit features.
pub fn route_batch(
    weak_logits: &Matrix,
    weak_f: &Matrix,
    table: Option<&ClassMeanTable>,
    tau: f64,
    strategy: PseudoStrategy,
) -> Result<PseudoLabelBatch> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(param("tau", "confidence threshold must lie in [0, 1]"));
    }
    if weak_logits.rows() != weak_f.rows() {
        return Err(Error::Dimension {
            op: "route_batch",
            expected: (weak_logits.rows(), weak_f.cols()),
            found: weak_f.shape(),
        });
    }
    if strategy.needs_means() && table.is_none() {
        return Err(Error::Contract(format!("strategy {} needs a class-mean table", strategy.name())));
    }
    let mut labels = Vec::with_capacity(weak_logits.rows());
    let mut probs = vec![0.0; weak_logits.cols()];
    for r in 0..weak_logits.rows() {
        probs.copy_from_slice(weak_logits.row(r));
        softmax_in_place(&mut probs, 1.0);
        let (mut cls, mut conf) = (0, f64::NEG_INFINITY);
        for (j, &p) in probs.iter().enumerate() {
            if p > conf {
                cls = j;
                conf = p;
            }
        }
        let ncm = table.and_then(|t| ncm_label(weak_f.row(r), t));
        let confident = conf >= tau;
        let route = match (strategy, confident) {
            (PseudoStrategy::Dcp, true) | (PseudoStrategy::ClassifierOnly, true) => Route::Classifier,
            (PseudoStrategy::Reversed, false) => Route::Classifier,
            (PseudoStrategy::Dcp, false) | (PseudoStrategy::NcmOnly, _) | (PseudoStrategy::Reversed, true) => {
                Route::Ncm
            }
            (PseudoStrategy::ClassifierOnly, false) => Route::Dropped,
        };
        let (route, label) = match route {
            Route::Classifier => (Route::Classifier, Some(cls)),
            Route::Ncm => match ncm {
                Some(q) => (Route::Ncm, Some(q)),
                None => (Route::Dropped, None),
            },
            Route::Dropped => (Route::Dropped, None),
        };
        labels.push(PseudoLabel { confidence: conf, classifier_label: cls, ncm_label: ncm, route, label });
    }
    Ok(PseudoLabelBatch { tau, strategy, labels })
}

/// Divide-and-conquer routing of an unlabeled batch (weak views).
pub fn dcp_route(weak_x: &Matrix, model: &ModelState, table: &ClassMeanTable, tau: f64) -> Result<PseudoLabelBatch> {
    let fwd = model.forward(weak_x)?;
    route_batch(&fwd.logits, fwd.f(), Some(table), tau, PseudoStrategy::Dcp)
}

// ---------------------------------------------------------------------------
// kernels

/// `sum_r CE(softmax(z_r / T), t_r) / denom` over rows with a target.
fn ce_rows(logits: &Matrix, targets: &[Option<usize>], temperature: f64, denom: f64) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if denom <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let mut p = vec![0.0; logits.cols()];
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(Error::Index { what: "target class", index: t, bound: logits.cols() });
        }
        p.copy_from_slice(logits.row(r));
        softmax_in_place(&mut p, temperature);
        loss -= safe_ln(p[t]);
        let g = grad.row_mut(r);
        for j in 0..p.len() {
            let hot = if j == t { 1.0 } else { 0.0 };
            g[j] = (p[j] - hot) / (denom * temperature);
        }
    }
    Ok((loss / denom, grad))
}

fn sup_kernel(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    ce_rows(logits, &targets, 1.0, labels.len() as f64)
}

fn uns_kernel(strong_logits: &Matrix, routing: &PseudoLabelBatch) -> Result<(f64, Matrix)> {
    if routing.len() != strong_logits.rows() {
        return Err(Error::Contract("routing and strong batch differ in length".into()));
    }
    ce_rows(strong_logits, &routing.targets(), 1.0, routing.len() as f64)
}

/// Distillation over the teacher's class range; new-class logits get no gradient.
fn cl_kernel(student_logits: &Matrix, teacher_logits: &Matrix, beta: f64) -> Result<(f64, Matrix)> {
    let kt = teacher_logits.cols();
    if kt > student_logits.cols() || teacher_logits.rows() != student_logits.rows() {
        return Err(Error::Dimension {
            op: "loss_cl",
            expected: (student_logits.rows(), student_logits.cols()),
            found: teacher_logits.shape(),
        });
    }
    let restricted = student_logits.select_cols(0..kt)?;
    let (value, _, g) = softmax_kl_backward(teacher_logits, &restricted, beta)?;
    let mut full = Matrix::zeros(student_logits.rows(), student_logits.cols());
    for r in 0..full.rows() {
        full.row_mut(r)[..kt].copy_from_slice(g.row(r));
    }
    Ok((value, full))
}

/// Contrastive alignment of features to their ETF anchors. Labeled rows
/// target their class; unlabeled rows count only when confident, targeting
/// the classifier label. Each part is averaged over its own batch.
fn fsr_kernel(
    labeled_f: &Matrix,
    labels: &[usize],
    unlabeled_f: &Matrix,
    routing: &PseudoLabelBatch,
    anchors: &Matrix,
    gamma: f64,
) -> Result<(f64, Matrix, Matrix)> {
    if routing.len() != unlabeled_f.rows() {
        return Err(Error::Contract("routing and unlabeled batch differ in length".into()));
    }
    let s_l = cosine_similarity_matrix(labeled_f, anchors)?.values;
    let t_l: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let (v_l, ds_l) = ce_rows(&s_l, &t_l, gamma, labels.len() as f64)?;
    let (g_l, _) = cosine_backward(labeled_f, anchors, &ds_l)?;

    let s_u = cosine_similarity_matrix(unlabeled_f, anchors)?.values;
    let t_u: Vec<Option<usize>> = routing
        .labels
        .iter()
        .map(|l| l.is_confident(routing.tau).then_some(l.classifier_label))
        .collect();
    let (v_u, ds_u) = ce_rows(&s_u, &t_u, gamma, routing.len() as f64)?;
    let (g_u, _) = cosine_backward(unlabeled_f, anchors, &ds_u)?;
    Ok((v_l + v_u, g_l, g_u))
}

/// Labeled part of the FSR loss evaluated directly on unit features,
/// averaged over rows.
pub fn fsr_feature_loss(features: &Matrix, labels: &[usize], frame: &EtfFrame, gamma: f64) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::Dimension { op: "fsr_feature_loss", expected: (features.rows(), 1), found: (labels.len(), 1) });
    }
    check_fsr_inputs(labels, &PseudoLabelBatch { tau: 1.0, strategy: PseudoStrategy::Dcp, labels: Vec::new() }, frame)?;
    let s = cosine_similarity_matrix(features, frame.anchors())?.values;
    let t: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    Ok(ce_rows(&s, &t, gamma, labels.len().max(1) as f64)?.0)
}

/// KL between teacher and student similarity-to-means distributions.
fn cud_kernel(student_f: &Matrix, teacher_f: &Matrix, means: &Matrix, xi: f64) -> Result<(f64, Matrix)> {
    let s_s = cosine_similarity_matrix(student_f, means)?.values;
    let s_t = cosine_similarity_matrix(teacher_f, means)?.values;
    let (value, _, ds) = softmax_kl_backward(&s_t, &s_s, xi)?;
    let (g, _) = cosine_backward(student_f, means, &ds)?;
    Ok((value, g))
}

// ---------------------------------------------------------------------------
// single-term wrappers

/// A loss value with its parameter gradients.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Gradients,
}

impl LossValue {
    fn zero(model: &ModelState) -> Self {
        Self { value: 0.0, grads: Gradients::zeros_like(model) }
    }
}

fn check_labels(labels: &[usize], model: &ModelState) -> Result<()> {
    let k = model.observed_classes();
    match labels.iter().find(|&&l| l >= k) {
        Some(&l) => Err(Error::Index { what: "label", index: l, bound: k }),
        None => Ok(()),
    }
}

/// Cross-entropy of the classifier on labeled data.
pub fn loss_sup(model: &ModelState, x: &Matrix, labels: &[usize]) -> Result<LossValue> {
    check_labels(labels, model)?;
    let fwd = model.forward(x)?;
    let (value, dl) = sup_kernel(&fwd.logits, labels)?;
    Ok(LossValue { value, grads: model.backward(&fwd, Some(&dl), None)? })
}

/// Cross-entropy of strong-view predictions against the routed hard labels.
/// Routing is an input, so nothing flows back into the pseudo-labels.
pub fn loss_uns_prime(model: &ModelState, strong_x: &Matrix, routing: &PseudoLabelBatch) -> Result<LossValue> {
    let fwd = model.forward(strong_x)?;
    let (value, dl) = uns_kernel(&fwd.logits, routing)?;
    Ok(LossValue { value, grads: model.backward(&fwd, Some(&dl), None)? })
}

/// Tempered logit distillation on exemplars. Zero without a teacher.
pub fn loss_cl(
    student: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    exemplar_x: &Matrix,
    beta: f64,
) -> Result<LossValue> {
    let Some(teacher) = teacher else {
        debug!("loss_cl: no teacher yet, contributing zero");
        return Ok(LossValue::zero(student));
    };
    let fwd = student.forward(exemplar_x)?;
    let t_logits = teacher.forward_logits(exemplar_x)?;
    let (value, dl) = cl_kernel(&fwd.logits, &t_logits, beta)?;
    Ok(LossValue { value, grads: student.backward(&fwd, Some(&dl), None)? })
}

/// Feature-space reservation loss against the ETF anchors.
pub fn loss_fsr(
    model: &ModelState,
    labeled_x: &Matrix,
    labels: &[usize],
    weak_x: &Matrix,
    routing: &PseudoLabelBatch,
    frame: &EtfFrame,
    gamma: f64,
) -> Result<LossValue> {
    check_fsr_inputs(labels, routing, frame)?;
    let fl = model.forward(labeled_x)?;
    let fu = model.forward(weak_x)?;
    let (value, gl, gu) = fsr_kernel(fl.f(), labels, fu.f(), routing, frame.anchors(), gamma)?;
    let mut grads = model.backward(&fl, None, Some(&gl))?;
    grads.add_assign(&model.backward(&fu, None, Some(&gu))?)?;
    Ok(LossValue { value, grads })
}

fn check_fsr_inputs(labels: &[usize], routing: &PseudoLabelBatch, frame: &EtfFrame) -> Result<()> {
    let k = frame.num_classes();
    let worst = labels.iter().copied().chain(routing.labels.iter().map(|l| l.classifier_label)).max();
    match worst {
        Some(c) if c >= k => Err(Error::Index { what: "ETF anchor", index: c, bound: k }),
        _ => Ok(()),
    }
}

/// Class-mean-anchored distillation on unlabeled data. The means are constants.
pub fn loss_cud(
    student: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    weak_x: &Matrix,
    table: &ClassMeanTable,
    xi: f64,
) -> Result<LossValue> {
    let Some(teacher) = teacher else {
        debug!("loss_cud: no teacher yet, contributing zero");
        return Ok(LossValue::zero(student));
    };
    if table.is_empty() {
        return Ok(LossValue::zero(student));
    }
    let fwd = student.forward(weak_x)?;
    let tf = teacher.forward_projection(weak_x)?.out;
    let (value, g) = cud_kernel(fwd.f(), &tf, table.means(), xi)?;
    Ok(LossValue { value, grads: student.backward(&fwd, None, Some(&g))? })
}

// ---------------------------------------------------------------------------
// total

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub uns: f64,
    pub cl: f64,
    pub fsr: f64,
    pub cud: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { uns: 1.0, cl: 1.0, fsr: 1.0, cud: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub use_fsr: bool,
    pub use_cud: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { weights: LossWeights::default(), beta: 0.1, gamma: 0.1, xi: 0.1, use_fsr: true, use_cud: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub uns: f64,
    pub cl: f64,
    pub fsr: f64,
    pub cud: f64,
    pub total: f64,
    pub high_conf: usize,
    pub low_conf: usize,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.sup + w.uns * self.uns + w.cl * self.cl + w.fsr * self.fsr + w.cud * self.cud
    }
}

/// Inputs of one optimisation step.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub labeled_x: &'a Matrix,
    pub labels: &'a [usize],
    pub weak_x: &'a Matrix,
    pub strong_x: &'a Matrix,
    pub exemplar_x: Option<&'a Matrix>,
}

/// Weighted sum of all enabled terms and its gradient. Distillation terms are
/// zero without a teacher; `table` is required when CUD is enabled and a
/// teacher exists.
pub fn total_loss(
    model: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    batch: &StepBatch<'_>,
    routing: &PseudoLabelBatch,
    table: Option<&ClassMeanTable>,
    frame: &EtfFrame,
    settings: &LossSettings,
) -> Result<(LossBreakdown, Gradients)> {
    let weak = model.forward(batch.weak_x)?;
    total_loss_with_weak(model, teacher, batch, weak, routing, table, frame, settings)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn total_loss_with_weak(
    model: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    batch: &StepBatch<'_>,
    weak: Forward,
    routing: &PseudoLabelBatch,
    table: Option<&ClassMeanTable>,
    frame: &EtfFrame,
    settings: &LossSettings,
) -> Result<(LossBreakdown, Gradients)> {
    check_labels(batch.labels, model)?;
    let w = settings.weights;
    let mut out = LossBreakdown {
        high_conf: routing.high_confidence(),
        low_conf: routing.low_confidence(),
        ..LossBreakdown::default()
    };

    let labeled = model.forward(batch.labeled_x)?;
    let strong = model.forward(batch.strong_x)?;

    let (sup, d_lab_logits) = sup_kernel(&labeled.logits, batch.labels)?;
    out.sup = sup;

    let (uns, d_strong) = uns_kernel(&strong.logits, routing)?;
    out.uns = uns;
    let d_strong = d_strong.scale(w.uns);

    let mut d_lab_f = None;
    let mut d_weak_f: Option<Matrix> = None;
    if settings.use_fsr {
        check_fsr_inputs(batch.labels, routing, frame)?;
        let (v, gl, gu) = fsr_kernel(labeled.f(), batch.labels, weak.f(), routing, frame.anchors(), settings.gamma)?;
        out.fsr = v;
        d_lab_f = Some(gl.scale(w.fsr));
        d_weak_f = Some(gu.scale(w.fsr));
    }

    let mut exemplar_part = None;
    if let Some(teacher) = teacher {
        if let Some(ex) = batch.exemplar_x {
            let fwd = model.forward(ex)?;
            let t_logits = teacher.forward_logits(ex)?;
            let (v, dl) = cl_kernel(&fwd.logits, &t_logits, settings.beta)?;
            out.cl = v;
            exemplar_part = Some((fwd, dl.scale(w.cl)));
        }
        if settings.use_cud {
            let table = table.ok_or_else(|| Error::Contract("CUD needs a class-mean table".into()))?;
            if !table.is_empty() {
                let tf = teacher.forward_projection(batch.weak_x)?.out;
                let (v, g) = cud_kernel(weak.f(), &tf, table.means(), settings.xi)?;
                out.cud = v;
                let g = g.scale(w.cud);
                match &mut d_weak_f {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    None => d_weak_f = Some(g),
                }
            }
        }
    }
    out.total = out.weighted_total(&w);

    let mut grads = model.backward(&labeled, Some(&d_lab_logits), d_lab_f.as_ref())?;
    grads.add_assign(&model.backward(&strong, Some(&d_strong), None)?)?;
    if let Some(df) = d_weak_f {
        grads.add_assign(&model.backward(&weak, None, Some(&df))?)?;
    }
    if let Some((fwd, dl)) = exemplar_part {
        grads.add_assign(&model.backward(&fwd, Some(&dl), None)?)?;
    }
    Ok((out, grads))
}

/// Renormalised mean of already-unit rows; exposed for diagnostics.
pub fn renormalized_mean(rows: &Matrix) -> Option<Vec<f64>> {
    let mean = rows.col_sums().scale(1.0 / rows.rows().max(1) as f64);
    let n = l2_normalize_rows(&mean, NORM_EPS);
    n.degenerate.is_empty().then(|| n.out.into_data())
}
