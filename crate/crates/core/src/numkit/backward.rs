//! Analytic backward rules for the fixed set of primitives the learner uses.
//!
//! Every rule is stateless: it recomputes whatever forward quantities it
//! needs from the inputs, so callers only have to keep the inputs around.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use super::matrix::{dot, matmul_nt, matmul_tn, Matrix};
use super::ops::{self, Normalized, NORM_EPS};
use crate::error::{param, Error, Result};

/// Differentiable primitives with a registered backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    BiasAdd,
    Relu,
    L2NormalizeRows,
    /// Softmax followed by cross-entropy against target distributions.
    SoftmaxCrossEntropy,
    /// `KL(softmax(teacher) || softmax(student))`, inputs ordered teacher, student.
    SoftmaxKl,
    CosineSimilarity,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Matmul,
        OpKind::BiasAdd,
        OpKind::Relu,
        OpKind::L2NormalizeRows,
        OpKind::SoftmaxCrossEntropy,
        OpKind::SoftmaxKl,
        OpKind::CosineSimilarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::SoftmaxKl => "softmax_kl",
            OpKind::CosineSimilarity => "cosine_similarity",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Relu | OpKind::L2NormalizeRows => 1,
            _ => 2,
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("no backward rule registered for op `{s}`")))
    }
}

/// Scalars some ops need besides their matrix inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpParams {
    pub temperature: f64,
    pub eps: f64,
}

impl Default for OpParams {
    fn default() -> Self {
        Self { temperature: 1.0, eps: NORM_EPS }
    }
}

/// Forward value of an op together with the gradient for one of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Runs the backward rule of `kind`, returning one [`GradPair`] per input.
///
/// Fused losses take a `1 x 1` upstream gradient.
pub fn backward(
    kind: OpKind,
    inputs: &[&Matrix],
    upstream: &Matrix,
    params: OpParams,
) -> Result<Vec<GradPair>> {
    if inputs.len() != kind.arity() {
        return Err(Error::Contract(format!(
            "{} expects {} inputs, got {}",
            kind.name(),
            kind.arity(),
            inputs.len()
        )));
    }
    let scalar_upstream = || -> Result<f64> {
        if upstream.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: kind.name(),
                expected: (1, 1),
                found: upstream.shape(),
            });
        }
        Ok(upstream.get(0, 0))
    };
    let pairs = match kind {
        OpKind::Matmul => {
            let value = super::matrix::matmul(inputs[0], inputs[1])?;
            value.check_same_shape(upstream, "matmul backward")?;
            let (ga, gb) = matmul_backward(inputs[0], inputs[1], upstream)?;
            vec![GradPair { value: value.clone(), grad: ga }, GradPair { value, grad: gb }]
        }
        OpKind::BiasAdd => {
            let value = ops::bias_add(inputs[0], inputs[1])?;
            value.check_same_shape(upstream, "bias_add backward")?;
            let (gx, gb) = bias_add_backward(upstream);
            vec![GradPair { value: value.clone(), grad: gx }, GradPair { value, grad: gb }]
        }
        OpKind::Relu => {
            let value = ops::relu(inputs[0]);
            let grad = relu_backward(inputs[0], upstream)?;
            vec![GradPair { value, grad }]
        }
        OpKind::L2NormalizeRows => {
            let n = ops::l2_normalize_rows(inputs[0], params.eps);
            let grad = l2_normalize_backward(&n, upstream)?;
            vec![GradPair { value: n.out, grad }]
        }
        OpKind::SoftmaxCrossEntropy => {
            let s = scalar_upstream()?;
            let (loss, g_logits, g_targets) =
                softmax_cross_entropy_backward(inputs[0], inputs[1], params.temperature)?;
            let value = Matrix::filled(1, 1, loss);
            vec![
                GradPair { value: value.clone(), grad: g_logits.scale(s) },
                GradPair { value, grad: g_targets.scale(s) },
            ]
        }
        OpKind::SoftmaxKl => {
            let s = scalar_upstream()?;
            let (loss, g_teacher, g_student) =
                softmax_kl_backward(inputs[0], inputs[1], params.temperature)?;
            let value = Matrix::filled(1, 1, loss);
            vec![
                GradPair { value: value.clone(), grad: g_teacher.scale(s) },
                GradPair { value, grad: g_student.scale(s) },
            ]
        }
        OpKind::CosineSimilarity => {
            let value = ops::cosine_similarity_matrix(inputs[0], inputs[1])?.values;
            let (ga, gb) = cosine_backward(inputs[0], inputs[1], upstream)?;
            vec![GradPair { value: value.clone(), grad: ga }, GradPair { value, grad: gb }]
        }
    };
    Ok(pairs)
}

pub fn matmul_backward(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

pub fn bias_add_backward(upstream: &Matrix) -> (Matrix, Matrix) {
    (upstream.clone(), upstream.col_sums())
}

pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.check_same_shape(upstream, "relu backward")?;
    let mut g = upstream.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Full Jacobian-vector product of row normalisation:
/// `dx = (dy - y (y . dy)) / |x|`; degenerate rows pass the gradient through.
pub fn l2_normalize_backward(forward: &Normalized, upstream: &Matrix) -> Result<Matrix> {
    forward.out.check_same_shape(upstream, "l2_normalize backward")?;
    let mut g = upstream.clone();
    let mut degenerate = forward.degenerate.iter().peekable();
    for r in 0..g.rows() {
        if degenerate.peek() == Some(&&r) {
            degenerate.next();
            continue;
        }
        let y = forward.out.row(r);
        let proj = dot(y, upstream.row(r));
        let inv = 1.0 / forward.norms[r];
        for (gv, yv) in g.row_mut(r).iter_mut().zip(y) {
            *gv = (*gv - yv * proj) * inv;
        }
    }
    Ok(g)
}

/// Mean over rows of `-sum_j t_j log softmax(z / T)_j`.
///
/// Returns `(loss, d loss / d logits, d loss / d targets)`.
pub fn softmax_cross_entropy_backward(
    logits: &Matrix,
    targets: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix, Matrix)> {
    logits.check_same_shape(targets, "softmax_cross_entropy")?;
    let probs = ops::softmax_rows(logits, temperature)?;
    let n = logits.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut g_logits = Matrix::zeros(logits.rows(), logits.cols());
    let mut g_targets = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let p = probs.row(r);
        let t = targets.row(r);
        let mass: f64 = t.iter().sum();
        for j in 0..p.len() {
            let lp = ops::safe_ln(p[j]);
            loss -= t[j] * lp;
            g_logits.set(r, j, (p[j] * mass - t[j]) / (n * temperature));
            g_targets.set(r, j, -lp / n);
        }
    }
    Ok((loss / n, g_logits, g_targets))
}

/// Index-target form of the fused softmax + cross-entropy.
pub fn softmax_cross_entropy_indices(
    logits: &Matrix,
    targets: &[usize],
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            expected: (logits.rows(), 1),
            found: (targets.len(), 1),
        });
    }
    let mut onehot = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Index { what: "target class", index: t, bound: logits.cols() });
        }
        onehot.set(r, t, 1.0);
    }
    let (loss, g, _) = softmax_cross_entropy_backward(logits, &onehot, temperature)?;
    Ok((loss, g))
}

/// Mean over rows of `KL(softmax(t / T) || softmax(s / T))`.
///
/// Returns `(loss, d loss / d teacher_logits, d loss / d student_logits)`.
pub fn softmax_kl_backward(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix, Matrix)> {
    teacher_logits.check_same_shape(student_logits, "softmax_kl")?;
    if !(temperature > 0.0) {
        return Err(param("temperature", "must be positive"));
    }
    let q = ops::softmax_rows(teacher_logits, temperature)?;
    let p = ops::softmax_rows(student_logits, temperature)?;
    let n = teacher_logits.rows().max(1) as f64;
    let scale = 1.0 / (n * temperature);
    let mut loss = 0.0;
    let mut g_t = Matrix::zeros(q.rows(), q.cols());
    let mut g_s = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let (qr, pr) = (q.row(r), p.row(r));
        let kl = ops::kl_row(qr, pr);
        loss += kl;
        for j in 0..qr.len() {
            g_s.set(r, j, (pr[j] - qr[j]) * scale);
            let log_ratio = ops::safe_ln(qr[j]) - ops::safe_ln(pr[j]);
            g_t.set(r, j, qr[j] * (log_ratio - kl) * scale);
        }
    }
    Ok((loss / n, g_t, g_s))
}

/// Gradients of `cosine_similarity_matrix(a, b)` w.r.t. `a` and `b`.
/// Degenerate rows have constant zero similarity and receive zero gradient.
pub fn cosine_backward(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    if upstream.shape() != (a.rows(), b.rows()) {
        return Err(Error::Dimension {
            op: "cosine backward",
            expected: (a.rows(), b.rows()),
            found: upstream.shape(),
        });
    }
    let mut na = ops::l2_normalize_rows(a, NORM_EPS);
    let mut nb = ops::l2_normalize_rows(b, NORM_EPS);
    for &r in &na.degenerate {
        na.out.row_mut(r).fill(0.0);
    }
    for &r in &nb.degenerate {
        nb.out.row_mut(r).fill(0.0);
    }
    let d_ahat = super::matrix::matmul(upstream, &nb.out)?;
    let d_bhat = matmul_tn(upstream, &na.out)?;
    let mut ga = l2_normalize_backward(&na, &d_ahat)?;
    let mut gb = l2_normalize_backward(&nb, &d_bhat)?;
    for &r in &na.degenerate {
        ga.row_mut(r).fill(0.0);
    }
    for &r in &nb.degenerate {
        gb.row_mut(r).fill(0.0);
    }
    Ok((ga, gb))
}
