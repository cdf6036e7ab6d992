//! Representation-collapse diagnostics.
//!
//! Effective rank is exp of the entropy of the normalized singular-value
//! spectrum of the mean-centered embedding matrix; uniformity is the
//! log-mean Gaussian potential over pairs of length-normalized rows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub effective_rank: f64,
    pub uniformity: f64,
}

/// Diagnostics over an N x m embedding matrix.
///
/// A fully collapsed (identical-row) matrix has effective rank 1. An
/// all-zero input is rejected as degenerate, as are zero-norm rows (the
/// uniformity term needs unit vectors).
pub fn collapse_metrics(rows: &Array2<f64>) -> Result<CollapseMetrics> {
    let (n, m) = rows.dim();
    if n == 0 || m == 0 {
        return Err(Error::Validation("empty embedding matrix".into()));
    }
    if rows.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation(
            "rank-0 (all-zero) embedding matrix".into(),
        ));
    }

    // Mean-center columns, then read singular values off the Gram matrix.
    let mean = rows.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut centered = rows.clone();
    for mut row in centered.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= mean[j];
        }
    }
    let gram = centered.t().dot(&centered);
    let eigenvalues = symmetric_eigenvalues(&gram);
    let singular: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).collect();
    let total: f64 = singular.iter().sum();

    let effective_rank = if total <= 1e-12 {
        // Centered matrix vanished: the spectrum is fully concentrated.
        1.0
    } else {
        let entropy: f64 = singular
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / total;
                -p * p.ln()
            })
            .sum();
        entropy.exp()
    };

    // Uniformity over length-normalized rows.
    let mut unit = rows.clone();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateEmbedding(format!(
                "row {i} has zero norm"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    let uniformity = if n < 2 {
        0.0
    } else {
        let mut acc = 0.0;
        let mut count = 0u64;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut d2 = 0.0;
                for c in 0..m {
                    let d = unit[[i, c]] - unit[[j, c]];
                    d2 += d * d;
                }
                acc += (-2.0 * d2).exp();
                count += 1;
            }
        }
        (acc / count as f64).ln()
    };

    Ok(CollapseMetrics {
        effective_rank,
        uniformity,
    })
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
pub fn symmetric_eigenvalues(matrix: &Array2<f64>) -> Vec<f64> {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "matrix must be square");
    let mut a = matrix.clone();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
            s.sqrt()
        };
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, p, q, c, s);
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Two-sided Givens rotation A <- J^T A J on the (p, q) plane.
fn rotate(a: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for i in 0..n {
        let aip = a[[i, p]];
        let aiq = a[[i, q]];
        a[[i, p]] = c * aip - s * aiq;
        a[[i, q]] = s * aip + c * aiq;
    }
    for j in 0..n {
        let apj = a[[p, j]];
        let aqj = a[[q, j]];
        a[[p, j]] = c * apj - s * aqj;
        a[[q, j]] = s * apj + c * aqj;
    }
}
