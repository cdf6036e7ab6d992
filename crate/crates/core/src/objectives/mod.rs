//! Training objectives: in-batch contrastive ranking loss over cosine
//! similarities, and the subnetwork-ensemble divergence loss, all with
//! analytic gradients.

mod bregman;

pub use bregman::{
    argmax_subnet, argmax_subnet_scores, bregman_divergence, bregman_loss, kernel_similarity,
    subnet_scores, BatchNorm, BregmanLoss, EnsembleConfig, EnsembleGrads, EnsembleParams,
    ScoreTrace, StatsMode, SubnetEnsemble, SubnetMlp, SubnetMode,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax temperature for the ranking loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Divergence-loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BregmanConfig {
    /// Gaussian kernel width.
    pub sigma: f64,
    /// Weight of the divergence term in the total loss.
    pub lambda: f64,
    /// Number of subnetworks.
    pub subnets: usize,
}

impl Default for BregmanConfig {
    fn default() -> Self {
        BregmanConfig {
            sigma: 2.0,
            lambda: 2.0,
            subnets: 10,
        }
    }
}

impl BregmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.subnets < 2 {
            return Err(Error::Config(format!(
                "subnets must be >= 2, got {}",
                self.subnets
            )));
        }
        Ok(())
    }
}

/// Per-step loss components; `total = mnr + lambda * bregman`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub mnr: f64,
    pub bregman: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combines the two loss components.
pub fn total_loss(mnr: f64, bregman: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        mnr,
        bregman,
        lambda,
        total: mnr + lambda * bregman,
    }
}

/// Pairwise cosine similarities with cached normalization for backward.
pub struct CosineSim {
    /// sim[i][j] = cos(s_a[i], s_b[j])
    pub sim: Array2<f64>,
    unit_a: Array2<f64>,
    unit_b: Array2<f64>,
    norm_a: Array1<f64>,
    norm_b: Array1<f64>,
}

/// Cosine similarity matrix between the rows of two N x m matrices.
///
/// Rows with vanishing norm cannot be normalized and are reported as
/// degenerate embeddings.
pub fn cosine_sim_matrix(s_a: &Array2<f64>, s_b: &Array2<f64>) -> Result<CosineSim> {
    assert_eq!(s_a.dim(), s_b.dim(), "row matrices must share a shape");
    let normalize = |s: &Array2<f64>, branch: &str| -> Result<(Array2<f64>, Array1<f64>)> {
        let mut unit = s.clone();
        let mut norms = Array1::zeros(s.nrows());
        for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding(format!(
                    "row {i} of branch {branch} has zero norm"
                )));
            }
            row.mapv_inplace(|x| x / norm);
            norms[i] = norm;
        }
        Ok((unit, norms))
    };
    let (unit_a, norm_a) = normalize(s_a, "a")?;
    let (unit_b, norm_b) = normalize(s_b, "b")?;
    let sim = unit_a.dot(&unit_b.t());
    Ok(CosineSim {
        sim,
        unit_a,
        unit_b,
        norm_a,
        norm_b,
    })
}

impl CosineSim {
    /// Backpropagates `d_sim` to the two input matrices.
    pub fn backward(&self, d_sim: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        // d/d unit_a = d_sim . unit_b, then through row normalization:
        // ds = (du - u <u, du>) / norm
        let d_unit_a = d_sim.dot(&self.unit_b);
        let d_unit_b = d_sim.t().dot(&self.unit_a);
        let through_norm = |unit: &Array2<f64>, d_unit: &Array2<f64>, norms: &Array1<f64>| {
            let mut out = Array2::zeros(unit.dim());
            for i in 0..unit.nrows() {
                let u = unit.row(i);
                let du = d_unit.row(i);
                let proj = u.dot(&du);
                for j in 0..unit.ncols() {
                    out[[i, j]] = (du[j] - u[j] * proj) / norms[i];
                }
            }
            out
        };
        (
            through_norm(&self.unit_a, &d_unit_a, &self.norm_a),
            through_norm(&self.unit_b, &d_unit_b, &self.norm_b),
        )
    }
}

/// Multiple-negatives ranking loss over a similarity matrix.
///
/// Diagonal entries are the positives; each row is a softmax over the batch
/// at temperature `t`, stabilized by row-max subtraction. Returns the loss
/// and its gradient with respect to `sim`.
pub fn mnr_loss(sim: &Array2<f64>, t: f64) -> (f64, Array2<f64>) {
    let n = sim.nrows();
    assert_eq!(n, sim.ncols(), "similarity matrix must be square");
    assert!(n >= 1, "empty similarity matrix");
    assert!(t > 0.0, "temperature must be positive");

    let mut loss = 0.0;
    let mut d_sim = Array2::zeros((n, n));
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| sim[[i, j]] / t).collect();
        let row_max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - row_max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + row_max - logits[i];
        for j in 0..n {
            let p = exps[j] / z;
            let delta = if i == j { 1.0 } else { 0.0 };
            d_sim[[i, j]] = (p - delta) / (n as f64 * t);
        }
    }
    (loss / n as f64, d_sim)
}

#[cfg(test)]
mod tests;
