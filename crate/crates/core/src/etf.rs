//! Simplex equiangular tight frames used as fixed class anchors.
//!
//! `E = sqrt(K / (K - 1)) * U * (I_K - 1_K 1_K^T / K)` with `U` a `d x K`
//! matrix of orthonormal columns. Every column of `E` is unit length and
//! every pair of distinct columns has inner product `-1 / (K - 1)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::numkit::{dot, matmul_tn, norm, Matrix};
use crate::rng::{gaussian, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfFrame {
    dim: usize,
    num_classes: usize,
    /// `d x K`, column `i` anchors class `i`.
    columns: Matrix,
    /// `K x d` transpose, the layout the similarity kernels want.
    anchors: Matrix,
    seed: u64,
}

impl EtfFrame {
    /// Wraps an arbitrary `d x K` matrix without checking it; see [`verify_etf`].
    pub fn from_columns(columns: Matrix, seed: u64) -> Self {
        let anchors = columns.transpose();
        Self { dim: columns.rows(), num_classes: columns.cols(), columns, anchors, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    /// One anchor per row (`K x d`).
    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `E^T E`.
    pub fn gram(&self) -> Matrix {
        matmul_tn(&self.columns, &self.columns).expect("square by construction")
    }
}

/// Builds a `dim x num_classes` simplex ETF from a seeded random rotation.
pub fn build_etf(num_classes: usize, dim: usize, seed: u64) -> Result<EtfFrame> {
    if num_classes < 2 {
        return Err(param("num_classes", "an ETF needs at least two classes"));
    }
    if dim < num_classes {
        return Err(param("dim", "dimension must be at least the number of classes"));
    }
    let u = random_orthonormal_columns(dim, num_classes, seed);
    let k = num_classes as f64;
    let scale = libm::sqrt(k / (k - 1.0));
    let mut columns = Matrix::zeros(dim, num_classes);
    for r in 0..dim {
        let row = u.row(r);
        let mean = row.iter().sum::<f64>() / k;
        for (c, &v) in row.iter().enumerate() {
            columns.set(r, c, scale * (v - mean));
        }
    }
    Ok(EtfFrame::from_columns(columns, seed))
}

/// Orthonormalises a seeded Gaussian `rows x cols` matrix column by column
/// with two passes of modified Gram-Schmidt.
fn random_orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, "etf", 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| gaussian(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let n = norm(&v);
        // a draw (numerically) inside the span is discarded and redrawn
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Matrix::from_fn(rows, cols, |r, c| basis[c][r])
}

/// Deviations of a frame from the simplex-ETF geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfReport {
    pub tolerance: f64,
    pub max_norm_deviation: f64,
    pub max_gram_deviation: f64,
    /// Columns whose norm differs from 1 by more than the tolerance.
    pub norm_violations: Vec<usize>,
    /// Column pairs `(i, j)`, `i < j`, whose inner product is off target.
    pub gram_violations: Vec<(usize, usize)>,
}

impl EtfReport {
    pub fn passed(&self) -> bool {
        self.norm_violations.is_empty() && self.gram_violations.is_empty()
    }
}

pub fn verify_etf(frame: &EtfFrame, tol: f64) -> EtfReport {
    let k = frame.num_classes;
    let target = if k > 1 { -1.0 / (k as f64 - 1.0) } else { 0.0 };
    let gram = frame.gram();
    let mut report = EtfReport {
        tolerance: tol,
        max_norm_deviation: 0.0,
        max_gram_deviation: 0.0,
        norm_violations: Vec::new(),
        gram_violations: Vec::new(),
    };
    for i in 0..k {
        let dev = libm::fabs(libm::sqrt(gram.get(i, i)) - 1.0);
        report.max_norm_deviation = report.max_norm_deviation.max(dev);
        if dev > tol {
            report.norm_violations.push(i);
        }
        for j in i + 1..k {
            let dev = libm::fabs(gram.get(i, j) - target);
            report.max_gram_deviation = report.max_gram_deviation.max(dev);
            if dev > tol {
                report.gram_violations.push((i, j));
            }
        }
    }
    report
}
