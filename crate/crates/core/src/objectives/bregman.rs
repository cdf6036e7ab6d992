//! Subnetwork-ensemble divergence.
//!
//! An ensemble of `k` scalar-scoring subnetworks realizes a convex
//! function as the pointwise maximum of its members. The divergence
//! between two vectors is the gap between the winning score of the first
//! vector and the score the second vector's winning subnetwork assigns to
//! the first vector; it is nonnegative by construction and is mapped to a
//! similarity in (0, 1] by a Gaussian kernel.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{NamedTensors, TensorMut, TensorRef};

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetMode {
    /// score_k(s) = <s, w_k> + eps_k
    Affine,
    /// affine -> batch norm -> relu -> batch norm -> affine to a scalar
    Mlp,
}

impl std::str::FromStr for SubnetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(SubnetMode::Affine),
            "mlp" => Ok(SubnetMode::Mlp),
            other => Err(Error::Config(format!(
                "unknown subnet mode {other:?} (expected affine or mlp)"
            ))),
        }
    }
}

/// Architecture of the scoring ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of subnetworks (>= 2).
    pub subnets: usize,
    /// Input dimension (the projection dimension of the encoder).
    pub input_dim: usize,
    pub mode: SubnetMode,
    /// Hidden width of mlp subnetworks.
    pub hidden: usize,
    /// Toggle for the two batch-norm layers of mlp subnetworks.
    pub batch_norm: bool,
}

impl EnsembleConfig {
    pub fn affine(subnets: usize, input_dim: usize) -> Self {
        EnsembleConfig {
            subnets,
            input_dim,
            mode: SubnetMode::Affine,
            hidden: 0,
            batch_norm: false,
        }
    }

    pub fn mlp(subnets: usize, input_dim: usize, hidden: usize, batch_norm: bool) -> Self {
        EnsembleConfig {
            subnets,
            input_dim,
            mode: SubnetMode::Mlp,
            hidden,
            batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subnets < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 subnetworks, got {}",
                self.subnets
            )));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("ensemble input_dim must be >= 1".into()));
        }
        if self.mode == SubnetMode::Mlp && self.hidden < 1 {
            return Err(Error::Config(format!(
                "mlp subnetworks need hidden >= 1, got {}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Batch normalization over one feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::zeros(dim),
        }
    }
}

/// One mlp subnetwork: affine m->h, (bn), relu, (bn), affine h->1.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn1: BatchNorm,
    pub bn2: BatchNorm,
    pub w2: Array1<f64>,
    /// Scalar output bias, stored as a length-1 tensor.
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleParams {
    Affine {
        /// k x m weight rows.
        weights: Array2<f64>,
        /// k biases.
        biases: Array1<f64>,
    },
    Mlp(Vec<SubnetMlp>),
}

/// The scoring ensemble; also reused as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetEnsemble {
    pub config: EnsembleConfig,
    pub params: EnsembleParams,
}

/// Gradients mirror the parameter layout exactly.
pub type EnsembleGrads = SubnetEnsemble;

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running averages (evaluation / single inputs).
    Running,
}

impl SubnetEnsemble {
    pub fn init(config: EnsembleConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let m = config.input_dim;
        let params = match config.mode {
            SubnetMode::Affine => {
                let bound = 1.0 / (m as f64).sqrt();
                let weights = uniform_matrix(config.subnets, m, bound, rng);
                let biases = Array1::zeros(config.subnets);
                EnsembleParams::Affine { weights, biases }
            }
            SubnetMode::Mlp => {
                let h = config.hidden;
                let mut nets = Vec::with_capacity(config.subnets);
                for _ in 0..config.subnets {
                    nets.push(SubnetMlp {
                        w1: uniform_matrix(m, h, 1.0 / (m as f64).sqrt(), rng),
                        b1: Array1::zeros(h),
                        bn1: BatchNorm::identity(h),
                        bn2: BatchNorm::identity(h),
                        w2: uniform_vector(h, 1.0 / (h as f64).sqrt(), rng),
                        b2: Array1::zeros(1),
                    });
                }
                EnsembleParams::Mlp(nets)
            }
        };
        Ok(SubnetEnsemble { config, params })
    }

    /// Zero-valued clone of the parameter layout (gradient container).
    pub fn zeros(config: &EnsembleConfig) -> Self {
        let m = config.input_dim;
        let params = match config.mode {
            SubnetMode::Affine => EnsembleParams::Affine {
                weights: Array2::zeros((config.subnets, m)),
                biases: Array1::zeros(config.subnets),
            },
            SubnetMode::Mlp => EnsembleParams::Mlp(
                (0..config.subnets)
                    .map(|_| SubnetMlp {
                        w1: Array2::zeros((m, config.hidden)),
                        b1: Array1::zeros(config.hidden),
                        bn1: BatchNorm::zeros(config.hidden),
                        bn2: BatchNorm::zeros(config.hidden),
                        w2: Array1::zeros(config.hidden),
                        b2: Array1::zeros(1),
                    })
                    .collect(),
            ),
        };
        SubnetEnsemble {
            config: *config,
            params,
        }
    }

    /// Scores every row of `x` under every subnetwork: (n x k).
    pub fn score_batch(&self, x: ArrayView2<'_, f64>, mode: StatsMode) -> (Array2<f64>, ScoreTrace) {
        let n = x.nrows();
        let k = self.config.subnets;
        let mut trace = ScoreTrace {
            x: x.to_owned(),
            mode,
            subnets: Vec::new(),
        };
        let mut scores;
        match &self.params {
            EnsembleParams::Affine { weights, biases } => {
                scores = x.dot(&weights.t());
                for mut row in scores.rows_mut() {
                    row += biases;
                }
            }
            EnsembleParams::Mlp(nets) => {
                scores = Array2::zeros((n, k));
                for (j, net) in nets.iter().enumerate() {
                    let mut z1 = x.dot(&net.w1);
                    for mut row in z1.rows_mut() {
                        row += &net.b1;
                    }
                    let (u, bn1) = if self.config.batch_norm {
                        let (y, c) = bn_forward(&z1, &net.bn1, mode);
                        (y, Some(c))
                    } else {
                        (z1.clone(), None)
                    };
                    let r = u.mapv(|v| v.max(0.0));
                    let (q, bn2) = if self.config.batch_norm {
                        let (y, c) = bn_forward(&r, &net.bn2, mode);
                        (y, Some(c))
                    } else {
                        (r.clone(), None)
                    };
                    let out = q.dot(&net.w2);
                    for i in 0..n {
                        scores[[i, j]] = out[i] + net.b2[0];
                    }
                    trace.subnets.push(SubnetTrace { bn1, u, bn2, q });
                }
            }
        }
        (scores, trace)
    }

    /// Scores a single vector using running statistics.
    pub fn score_one(&self, s: ArrayView1<'_, f64>) -> Vec<f64> {
        let x = s.insert_axis(Axis(0));
        let (scores, _) = self.score_batch(x, StatsMode::Running);
        scores.row(0).to_vec()
    }

    /// Backpropagates `d_scores` through the trace, accumulating parameter
    /// gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        trace: &ScoreTrace,
        d_scores: &Array2<f64>,
        grads: &mut EnsembleGrads,
    ) -> Array2<f64> {
        let x = &trace.x;
        let n = x.nrows();
        let mut d_x = Array2::zeros(x.dim());
        match (&self.params, &mut grads.params) {
            (
                EnsembleParams::Affine { weights, .. },
                EnsembleParams::Affine {
                    weights: g_w,
                    biases: g_b,
                },
            ) => {
                d_x += &d_scores.dot(weights);
                *g_w += &d_scores.t().dot(x);
                *g_b += &d_scores.sum_axis(Axis(0));
            }
            (EnsembleParams::Mlp(nets), EnsembleParams::Mlp(g_nets)) => {
                for (j, (net, g_net)) in nets.iter().zip(g_nets.iter_mut()).enumerate() {
                    let st = &trace.subnets[j];
                    let d_out = d_scores.column(j);
                    // score = q . w2 + b2
                    let mut d_q = Array2::zeros((n, self.config.hidden));
                    for i in 0..n {
                        for hh in 0..self.config.hidden {
                            d_q[[i, hh]] = d_out[i] * net.w2[hh];
                        }
                    }
                    g_net.w2 += &st.q.t().dot(&d_out);
                    g_net.b2[0] += d_out.sum();

                    let d_r = match (&st.bn2, self.config.batch_norm) {
                        (Some(cache), true) => bn_backward(
                            cache,
                            &net.bn2,
                            &d_q,
                            &mut g_net.bn2.gamma,
                            &mut g_net.bn2.beta,
                        ),
                        _ => d_q,
                    };
                    let mut d_u = d_r;
                    for (du, &u) in d_u.iter_mut().zip(st.u.iter()) {
                        if u <= 0.0 {
                            *du = 0.0;
                        }
                    }
                    let d_z1 = match (&st.bn1, self.config.batch_norm) {
                        (Some(cache), true) => bn_backward(
                            cache,
                            &net.bn1,
                            &d_u,
                            &mut g_net.bn1.gamma,
                            &mut g_net.bn1.beta,
                        ),
                        _ => d_u,
                    };
                    g_net.w1 += &x.t().dot(&d_z1);
                    g_net.b1 += &d_z1.sum_axis(Axis(0));
                    d_x += &d_z1.dot(&net.w1.t());
                }
            }
            _ => panic!("gradient container does not match ensemble mode"),
        }
        d_x
    }

    /// Folds the batch statistics recorded in `trace` into the running
    /// averages: running <- momentum * running + (1 - momentum) * batch.
    pub fn update_running_stats(&mut self, trace: &ScoreTrace, momentum: f64) {
        if trace.mode != StatsMode::Batch || !self.config.batch_norm {
            return;
        }
        if let EnsembleParams::Mlp(nets) = &mut self.params {
            for (net, st) in nets.iter_mut().zip(trace.subnets.iter()) {
                for (bn, cache) in [(&mut net.bn1, &st.bn1), (&mut net.bn2, &st.bn2)] {
                    if let Some(c) = cache {
                        for h in 0..bn.running_mean.len() {
                            bn.running_mean[h] =
                                momentum * bn.running_mean[h] + (1.0 - momentum) * c.mean[h];
                            bn.running_var[h] =
                                momentum * bn.running_var[h] + (1.0 - momentum) * c.var[h];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cache for one scoring pass.
pub struct ScoreTrace {
    x: Array2<f64>,
    mode: StatsMode,
    subnets: Vec<SubnetTrace>,
}

impl ScoreTrace {
    /// Smallest |pre-activation| at the relu layers; infinity in affine
    /// mode. Finite-difference tests resample instances that sit on a kink.
    pub fn min_relu_margin(&self) -> f64 {
        self.subnets
            .iter()
            .flat_map(|s| s.u.iter())
            .fold(f64::INFINITY, |acc, &u| acc.min(u.abs()))
    }
}

struct SubnetTrace {
    bn1: Option<BnCache>,
    u: Array2<f64>,
    bn2: Option<BnCache>,
    q: Array2<f64>,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
    batch_stats: bool,
}

fn bn_forward(x: &Array2<f64>, bn: &BatchNorm, mode: StatsMode) -> (Array2<f64>, BnCache) {
    let n = x.nrows() as f64;
    let (mean, var, batch_stats) = match mode {
        StatsMode::Batch => {
            let mean = x.sum_axis(Axis(0)) / n;
            let mut var = Array1::zeros(x.ncols());
            for row in x.rows() {
                for (j, &v) in row.iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            var /= n;
            (mean, var, true)
        }
        StatsMode::Running => (bn.running_mean.clone(), bn.running_var.clone(), false),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.clone();
    for mut row in xhat.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = bn.gamma[j] * *v + bn.beta[j];
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            batch_stats,
        },
    )
}

fn bn_backward(
    cache: &BnCache,
    bn: &BatchNorm,
    d_y: &Array2<f64>,
    g_gamma: &mut Array1<f64>,
    g_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, h) = d_y.dim();
    let nf = n as f64;
    let mut d_x = Array2::zeros((n, h));
    for j in 0..h {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            sum_dy += d_y[[i, j]];
            sum_dy_xhat += d_y[[i, j]] * cache.xhat[[i, j]];
        }
        g_gamma[j] += sum_dy_xhat;
        g_beta[j] += sum_dy;
        let gamma = bn.gamma[j];
        if cache.batch_stats {
            // Normalization statistics depend on the batch, so gradients
            // couple across rows.
            for i in 0..n {
                let dxhat = d_y[[i, j]] * gamma;
                d_x[[i, j]] = cache.inv_std[j] / nf
                    * (nf * dxhat
                        - gamma * sum_dy
                        - cache.xhat[[i, j]] * gamma * sum_dy_xhat);
            }
        } else {
            for i in 0..n {
                d_x[[i, j]] = d_y[[i, j]] * gamma * cache.inv_std[j];
            }
        }
    }
    d_x
}

/// Scores of one vector under every subnetwork (running statistics).
pub fn subnet_scores(s: ArrayView1<'_, f64>, ensemble: &SubnetEnsemble) -> Vec<f64> {
    ensemble.score_one(s)
}

/// Smallest index attaining the maximal score.
pub fn argmax_subnet_scores(scores: &[f64]) -> usize {
    argmax_iter(scores.iter().copied())
}

fn argmax_iter(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in scores.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Index of the winning subnetwork for `s` (ties break to the lowest index).
pub fn argmax_subnet(s: ArrayView1<'_, f64>, ensemble: &SubnetEnsemble) -> usize {
    argmax_subnet_scores(&ensemble.score_one(s))
}

/// Divergence between two vectors under the ensemble.
///
/// With `a_hat`/`b_hat` the winning subnetworks of `s_a`/`s_b`, the value
/// is `score_{a_hat}(s_a) - score_{b_hat}(s_a)`, which is nonnegative
/// because `a_hat` maximizes the score of `s_a` over the ensemble.
pub fn bregman_divergence(
    s_a: ArrayView1<'_, f64>,
    s_b: ArrayView1<'_, f64>,
    ensemble: &SubnetEnsemble,
) -> f64 {
    let scores_a = ensemble.score_one(s_a);
    let scores_b = ensemble.score_one(s_b);
    let a_hat = argmax_subnet_scores(&scores_a);
    let b_hat = argmax_subnet_scores(&scores_b);
    scores_a[a_hat] - scores_a[b_hat]
}

/// Gaussian kernel mapping a divergence to a similarity in (0, 1].
///
/// Panics on negative input: the divergence is nonnegative by
/// construction, so a negative value indicates a bug upstream.
pub fn kernel_similarity(divergence: f64, sigma: f64) -> f64 {
    assert!(
        divergence >= 0.0,
        "negative divergence {divergence}: argmax dominance violated"
    );
    assert!(sigma > 0.0, "sigma must be positive");
    (-divergence / (2.0 * sigma * sigma)).exp()
}

/// Divergence loss over a batch, with gradients.
pub struct BregmanLoss {
    pub loss: f64,
    pub d_s_a: Array2<f64>,
    pub d_s_b: Array2<f64>,
    pub grads: EnsembleGrads,
    /// Kernel similarities psi[i][j].
    pub psi: Array2<f64>,
    /// Forward cache; training uses it to refresh running statistics.
    pub trace: ScoreTrace,
}

/// Contrastive loss over kernel similarities of pairwise divergences.
///
/// `psi[i][j] = exp(-G(s_a[i], s_b[j]) / (2 sigma^2))`; each row is scored
/// with a softmax over the batch with the diagonal as the positive. Rows of
/// both branches are scored by one pass over their stacked matrix so batch
/// statistics are shared; gradients treat the winning indices as constants.
pub fn bregman_loss(
    s_a: &Array2<f64>,
    s_b: &Array2<f64>,
    ensemble: &SubnetEnsemble,
    sigma: f64,
) -> BregmanLoss {
    assert_eq!(s_a.dim(), s_b.dim(), "branch matrices must share a shape");
    assert!(sigma > 0.0, "sigma must be positive");
    let n = s_a.nrows();
    let k = ensemble.config.subnets;

    let mut stacked = Array2::zeros((2 * n, s_a.ncols()));
    stacked.slice_mut(s![..n, ..]).assign(s_a);
    stacked.slice_mut(s![n.., ..]).assign(s_b);
    let (scores, trace) = ensemble.score_batch(stacked.view(), StatsMode::Batch);

    let a_hat: Vec<usize> = (0..n)
        .map(|i| argmax_iter(scores.row(i).iter().copied()))
        .collect();
    let b_hat: Vec<usize> = (0..n)
        .map(|j| argmax_iter(scores.row(n + j).iter().copied()))
        .collect();

    let mut psi = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let g = scores[[i, a_hat[i]]] - scores[[i, b_hat[j]]];
            psi[[i, j]] = kernel_similarity(g, sigma);
        }
    }

    // -log softmax over each row of psi, positives on the diagonal.
    let mut loss = 0.0;
    let mut d_psi = Array2::zeros((n, n));
    for i in 0..n {
        let row = psi.row(i);
        let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - row_max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + row_max - psi[[i, i]];
        for j in 0..n {
            let p = exps[j] / z;
            let delta = if i == j { 1.0 } else { 0.0 };
            d_psi[[i, j]] = (p - delta) / n as f64;
        }
    }
    loss /= n as f64;

    // d psi / d G = -psi / (2 sigma^2); winning indices held fixed.
    let scale = -1.0 / (2.0 * sigma * sigma);
    let mut d_scores = Array2::zeros((2 * n, k));
    for i in 0..n {
        for j in 0..n {
            let d_g = d_psi[[i, j]] * psi[[i, j]] * scale;
            d_scores[[i, a_hat[i]]] += d_g;
            d_scores[[i, b_hat[j]]] -= d_g;
        }
    }

    let mut grads = SubnetEnsemble::zeros(&ensemble.config);
    let d_stacked = ensemble.backward(&trace, &d_scores, &mut grads);
    let d_s_a = d_stacked.slice(s![..n, ..]).to_owned();
    let d_s_b = d_stacked.slice(s![n.., ..]).to_owned();

    BregmanLoss {
        loss,
        d_s_a,
        d_s_b,
        grads,
        psi,
        trace,
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    m
}

fn uniform_vector(len: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut v = Array1::zeros(len);
    for x in v.iter_mut() {
        *x = rng.random_range(-bound..bound);
    }
    v
}

impl NamedTensors for SubnetEnsemble {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        match &self.params {
            EnsembleParams::Affine { weights, biases } => {
                out.push(("ensemble.weights".to_string(), TensorRef::M(weights)));
                out.push(("ensemble.biases".to_string(), TensorRef::V(biases)));
            }
            EnsembleParams::Mlp(nets) => {
                for (i, net) in nets.iter().enumerate() {
                    out.push((format!("ensemble.{i}.w1"), TensorRef::M(&net.w1)));
                    out.push((format!("ensemble.{i}.b1"), TensorRef::V(&net.b1)));
                    out.push((format!("ensemble.{i}.bn1.gamma"), TensorRef::V(&net.bn1.gamma)));
                    out.push((format!("ensemble.{i}.bn1.beta"), TensorRef::V(&net.bn1.beta)));
                    out.push((format!("ensemble.{i}.bn2.gamma"), TensorRef::V(&net.bn2.gamma)));
                    out.push((format!("ensemble.{i}.bn2.beta"), TensorRef::V(&net.bn2.beta)));
                    out.push((format!("ensemble.{i}.w2"), TensorRef::V(&net.w2)));
                    out.push((format!("ensemble.{i}.b2"), TensorRef::V(&net.b2)));
                }
            }
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        match &mut self.params {
            EnsembleParams::Affine { weights, biases } => {
                out.push(("ensemble.weights".to_string(), TensorMut::M(weights)));
                out.push(("ensemble.biases".to_string(), TensorMut::V(biases)));
            }
            EnsembleParams::Mlp(nets) => {
                for (i, net) in nets.iter_mut().enumerate() {
                    out.push((format!("ensemble.{i}.w1"), TensorMut::M(&mut net.w1)));
                    out.push((format!("ensemble.{i}.b1"), TensorMut::V(&mut net.b1)));
                    out.push((
                        format!("ensemble.{i}.bn1.gamma"),
                        TensorMut::V(&mut net.bn1.gamma),
                    ));
                    out.push((
                        format!("ensemble.{i}.bn1.beta"),
                        TensorMut::V(&mut net.bn1.beta),
                    ));
                    out.push((
                        format!("ensemble.{i}.bn2.gamma"),
                        TensorMut::V(&mut net.bn2.gamma),
                    ));
                    out.push((
                        format!("ensemble.{i}.bn2.beta"),
                        TensorMut::V(&mut net.bn2.beta),
                    ));
                    out.push((format!("ensemble.{i}.w2"), TensorMut::V(&mut net.w2)));
                    out.push((format!("ensemble.{i}.b2"), TensorMut::V(&mut net.b2)));
                }
            }
        }
        out
    }

    fn state(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        if let EnsembleParams::Mlp(nets) = &self.params {
            for (i, net) in nets.iter().enumerate() {
                out.push((
                    format!("ensemble.{i}.bn1.running_mean"),
                    TensorRef::V(&net.bn1.running_mean),
                ));
                out.push((
                    format!("ensemble.{i}.bn1.running_var"),
                    TensorRef::V(&net.bn1.running_var),
                ));
                out.push((
                    format!("ensemble.{i}.bn2.running_mean"),
                    TensorRef::V(&net.bn2.running_mean),
                ));
                out.push((
                    format!("ensemble.{i}.bn2.running_var"),
                    TensorRef::V(&net.bn2.running_var),
                ));
            }
        }
        out
    }

    fn state_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        if let EnsembleParams::Mlp(nets) = &mut self.params {
            for (i, net) in nets.iter_mut().enumerate() {
                out.push((
                    format!("ensemble.{i}.bn1.running_mean"),
                    TensorMut::V(&mut net.bn1.running_mean),
                ));
                out.push((
                    format!("ensemble.{i}.bn1.running_var"),
                    TensorMut::V(&mut net.bn1.running_var),
                ));
                out.push((
                    format!("ensemble.{i}.bn2.running_mean"),
                    TensorMut::V(&mut net.bn2.running_mean),
                ));
                out.push((
                    format!("ensemble.{i}.bn2.running_var"),
                    TensorMut::V(&mut net.bn2.running_var),
                ));
            }
        }
        out
    }

    fn all_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        match &mut self.params {
            EnsembleParams::Affine { weights, biases } => vec![
                ("ensemble.weights".to_string(), TensorMut::M(weights)),
                ("ensemble.biases".to_string(), TensorMut::V(biases)),
            ],
            EnsembleParams::Mlp(nets) => {
                // Keep the order of `all()`: every trainable tensor, then
                // every state tensor.
                let mut trainable = Vec::new();
                let mut state = Vec::new();
                for (i, net) in nets.iter_mut().enumerate() {
                    trainable.push((format!("ensemble.{i}.w1"), TensorMut::M(&mut net.w1)));
                    trainable.push((format!("ensemble.{i}.b1"), TensorMut::V(&mut net.b1)));
                    trainable.push((
                        format!("ensemble.{i}.bn1.gamma"),
                        TensorMut::V(&mut net.bn1.gamma),
                    ));
                    trainable.push((
                        format!("ensemble.{i}.bn1.beta"),
                        TensorMut::V(&mut net.bn1.beta),
                    ));
                    trainable.push((
                        format!("ensemble.{i}.bn2.gamma"),
                        TensorMut::V(&mut net.bn2.gamma),
                    ));
                    trainable.push((
                        format!("ensemble.{i}.bn2.beta"),
                        TensorMut::V(&mut net.bn2.beta),
                    ));
                    trainable.push((format!("ensemble.{i}.w2"), TensorMut::V(&mut net.w2)));
                    trainable.push((format!("ensemble.{i}.b2"), TensorMut::V(&mut net.b2)));
                    state.push((
                        format!("ensemble.{i}.bn1.running_mean"),
                        TensorMut::V(&mut net.bn1.running_mean),
                    ));
                    state.push((
                        format!("ensemble.{i}.bn1.running_var"),
                        TensorMut::V(&mut net.bn1.running_var),
                    ));
                    state.push((
                        format!("ensemble.{i}.bn2.running_mean"),
                        TensorMut::V(&mut net.bn2.running_mean),
                    ));
                    state.push((
                        format!("ensemble.{i}.bn2.running_var"),
                        TensorMut::V(&mut net.bn2.running_var),
                    ));
                }
                trainable.extend(state);
                trainable
            }
        }
    }
}
