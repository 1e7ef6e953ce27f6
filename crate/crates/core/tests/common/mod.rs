//! Shared test support: random loss instances and a central-difference
//! gradient checker. Also compiled into the lab acceptance target.
#![allow(dead_code)]

pub mod oracles;

use sscl_core::etf::{build_etf, EtfFrame};
use sscl_core::losses::{
    loss_cl, loss_cud, loss_fsr, loss_sup, loss_uns_prime, route_batch, total_loss, ClassMeanTable, LossSettings,
    LossValue, LossWeights, PseudoLabelBatch, PseudoStrategy, StepBatch,
};
use sscl_core::model::{ModelConfig, ModelState, TeacherSnapshot};
use sscl_core::numkit::{l2_normalize_rows, Matrix};
use sscl_core::rng::{gaussian, rng_for, LabRng};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

pub struct Instance {
    pub student: ModelState,
    pub teacher: TeacherSnapshot,
    pub frame: EtfFrame,
    pub labeled_x: Matrix,
    pub labels: Vec<usize>,
    pub weak_x: Matrix,
    pub strong_x: Matrix,
    pub exemplar_x: Matrix,
    pub routing: PseudoLabelBatch,
    pub table: ClassMeanTable,
    pub settings: LossSettings,
}

fn gauss_matrix(rows: usize, cols: usize, scale: f64, rng: &mut LabRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

/// A two-task situation: a teacher over classes {0, 1} and a perturbed,
/// expanded student over {0, 1, 2, 3}.
pub fn instance(seed: u64) -> Instance {
    let mut rng = rng_for(seed, "instance", 0);
    let cfg = ModelConfig { input_dim: 5, hidden: vec![8, 6], proj_dim: 6, projector_bias: true };
    let mut teacher = ModelState::new(cfg, seed).unwrap();
    teacher.expand_classifier(2, &mut rng).unwrap();
    let mut student = teacher.clone();
    for p in student.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.2 * gaussian(&mut rng);
        }
    }
    student.expand_classifier(2, &mut rng).unwrap();
    // spread the logits so confidences straddle the threshold
    let ci = student.classifier_weight_index();
    for v in student.parameters_mut()[ci].data_mut() {
        *v *= 3.0;
    }
    let frame = build_etf(4, 6, seed).unwrap();

    let labeled_x = gauss_matrix(6, 5, 1.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
    let weak_x = gauss_matrix(8, 5, 1.0, &mut rng);
    let strong_x = weak_x.add(&gauss_matrix(8, 5, 0.3, &mut rng)).unwrap();
    let exemplar_x = gauss_matrix(5, 5, 1.0, &mut rng);

    let table = ClassMeanTable::new(vec![2, 3], l2_normalize_rows(&gauss_matrix(2, 6, 1.0, &mut rng), 1e-12).out).unwrap();
    let weak = student.forward(&weak_x).unwrap();
    let mut conf: Vec<f64> = (0..weak_x.rows())
        .map(|r| {
            let row = weak.logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|v| (v - m).exp()).sum::<f64>()
        })
        .collect();
    conf.sort_by(f64::total_cmp);
    let tau = conf[conf.len() / 2];
    let routing = route_batch(&weak.logits, weak.f(), Some(&table), tau, PseudoStrategy::Dcp).unwrap();

    let w = |rng: &mut LabRng| 0.5 + (gaussian(rng).abs()).min(2.0);
    let settings = LossSettings {
        weights: LossWeights { uns: w(&mut rng), cl: w(&mut rng), fsr: w(&mut rng), cud: w(&mut rng) },
        beta: 0.5,
        gamma: 0.5,
        xi: 0.5,
        use_fsr: true,
        use_cud: true,
    };
    Instance {
        student,
        teacher: teacher.snapshot(1),
        frame,
        labeled_x,
        labels,
        weak_x,
        strong_x,
        exemplar_x,
        routing,
        table,
        settings,
    }
}

pub const LOSS_NAMES: [&str; 6] = ["sup", "uns", "cl", "fsr", "cud", "total"];

/// Evaluates one named loss of the instance at parameters `m`.
pub fn eval_loss(inst: &Instance, name: &str, m: &ModelState) -> LossValue {
    let s = &inst.settings;
    match name {
        "sup" => loss_sup(m, &inst.labeled_x, &inst.labels).unwrap(),
        "uns" => loss_uns_prime(m, &inst.strong_x, &inst.routing).unwrap(),
        "cl" => loss_cl(m, Some(&inst.teacher), &inst.exemplar_x, s.beta).unwrap(),
        "fsr" => loss_fsr(m, &inst.labeled_x, &inst.labels, &inst.weak_x, &inst.routing, &inst.frame, s.gamma).unwrap(),
        "cud" => loss_cud(m, Some(&inst.teacher), &inst.weak_x, &inst.table, s.xi).unwrap(),
        "total" => {
            let batch = StepBatch {
                labeled_x: &inst.labeled_x,
                labels: &inst.labels,
                weak_x: &inst.weak_x,
                strong_x: &inst.strong_x,
                exemplar_x: Some(&inst.exemplar_x),
            };
            let (b, grads) =
                total_loss(m, Some(&inst.teacher), &batch, &inst.routing, Some(&inst.table), &inst.frame, s).unwrap();
            LossValue { value: b.total, grads }
        }
        other => panic!("unknown loss {other}"),
    }
}

fn relu_patterns(inst: &Instance, m: &ModelState) -> Vec<bool> {
    [&inst.labeled_x, &inst.weak_x, &inst.strong_x, &inst.exemplar_x]
        .iter()
        .flat_map(|x| m.forward(x).unwrap().relu_pattern())
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Worst `|a - n| / max(|a| + |n|, 1e-6)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a step flipped a ReLU.
    pub skipped: usize,
}

/// Central differences with step `FD_STEP` against the analytic gradient,
/// skipping coordinates whose step changes the ReLU pattern.
pub fn grad_check(inst: &Instance, name: &str) -> GradCheck {
    let analytic = eval_loss(inst, name, &inst.student).grads;
    let base_pattern = relu_patterns(inst, &inst.student);
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (pi, tensor) in analytic.tensors().iter().enumerate() {
        for e in 0..tensor.data().len() {
            let shifted = |delta: f64| {
                let mut m = inst.student.clone();
                m.parameters_mut()[pi].data_mut()[e] += delta;
                m
            };
            let (plus, minus) = (shifted(FD_STEP), shifted(-FD_STEP));
            if relu_patterns(inst, &plus) != base_pattern || relu_patterns(inst, &minus) != base_pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (eval_loss(inst, name, &plus).value - eval_loss(inst, name, &minus).value) / (2.0 * FD_STEP);
            let a = tensor.data()[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}
