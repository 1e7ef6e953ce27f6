//! Forward primitives used by the learner and the loss suite.

use alloc::vec::Vec;

use super::matrix::{dot, norm, Matrix};
use crate::error::{param, Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Rows with Euclidean norm at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Output of [`l2_normalize_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub out: Matrix,
    /// Input row norms, kept for the backward pass.
    pub norms: Vec<f64>,
    /// Rows whose norm was `<= eps`; these are passed through unchanged.
    pub degenerate: Vec<usize>,
}

pub fn l2_normalize_rows(x: &Matrix, eps: f64) -> Normalized {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    let mut degenerate = Vec::new();
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        norms.push(n);
        if n > eps {
            for v in out.row_mut(r) {
                *v /= n;
            }
        } else {
            degenerate.push(r);
        }
    }
    Normalized { out, norms, degenerate }
}

/// Row-wise softmax of `x / temperature`, stabilised by max subtraction.
pub fn softmax_rows(x: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(param("temperature", "must be a positive finite number"));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) / temperature);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub(crate) fn safe_ln(p: f64) -> f64 {
    libm::log(if p < PROB_FLOOR { PROB_FLOOR } else { p })
}

/// Mean negative log-likelihood of `targets` under the row distributions.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != probs.rows() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            expected: (probs.rows(), 1),
            found: (targets.len(), 1),
        });
    }
    if probs.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::Index { what: "target class", index: t, bound: probs.cols() });
        }
        total -= safe_ln(probs.get(r, t));
    }
    Ok(total / probs.rows() as f64)
}

/// Mean over rows of `KL(p_row || q_row)`.
pub fn kl_divergence_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    p.check_same_shape(q, "kl_divergence_rows")?;
    if p.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..p.rows()).map(|r| kl_row(p.row(r), q.row(r))).sum();
    Ok(total / p.rows() as f64)
}

pub(crate) fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (safe_ln(pi) - safe_ln(qi));
        }
    }
    // clamping can leave a -1e-17 residue on identical rows
    if acc < 0.0 {
        0.0
    } else {
        acc
    }
}

/// Cosine similarities between every row of `a` and every row of `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub values: Matrix,
    /// Zero-norm rows of `a`; their similarities are defined as 0.
    pub degenerate_a: Vec<usize>,
    pub degenerate_b: Vec<usize>,
}

pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Similarity> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "cosine_similarity_matrix",
            expected: (b.rows(), a.cols()),
            found: b.shape(),
        });
    }
    let na = l2_normalize_rows(a, NORM_EPS);
    let nb = l2_normalize_rows(b, NORM_EPS);
    let mut values = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        if na.degenerate.binary_search(&i).is_ok() {
            continue;
        }
        for j in 0..b.rows() {
            if nb.degenerate.binary_search(&j).is_ok() {
                continue;
            }
            values.set(i, j, dot(na.out.row(i), nb.out.row(j)).clamp(-1.0, 1.0));
        }
    }
    Ok(Similarity { values, degenerate_a: na.degenerate, degenerate_b: nb.degenerate })
}

/// Adds a `1 x cols` bias row to every row of `x`.
pub fn bias_add(x: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows() != 1 || bias.cols() != x.cols() {
        return Err(Error::Dimension { op: "bias_add", expected: (1, x.cols()), found: bias.shape() });
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}
