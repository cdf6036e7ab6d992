//! Classification probes over frozen embeddings.
//!
//! A linear or one-hidden-layer head is trained with AdamW on the train
//! split, early-stopped on dev macro-F1, and scored on test. Features are
//! standardized with train-split statistics so heads see comparable scales
//! across encoders.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::f1_scores;
use super::EmbeddingMatrix;
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, substream};
use crate::tensors::{NamedTensors, TensorMut, TensorRef};
use crate::training::{adamw_step, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeHead {
    Linear,
    Mlp,
}

impl std::str::FromStr for ProbeHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeHead::Linear),
            "mlp" => Ok(ProbeHead::Mlp),
            other => Err(Error::Config(format!(
                "unknown probe head {other:?} (expected linear or mlp)"
            ))),
        }
    }
}

impl std::fmt::Display for ProbeHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeHead::Linear => write!(f, "linear"),
            ProbeHead::Mlp => write!(f, "mlp"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub head: ProbeHead,
    /// Hidden width of the mlp head.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Consecutive non-improving dev epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            head: ProbeHead::Linear,
            hidden: 256,
            epochs: 30,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            patience: 3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.head == ProbeHead::Mlp && self.hidden < 1 {
            return Err(Error::Config("mlp head needs hidden >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Caller-supplied model/setting tag.
    pub tag: String,
    pub head: ProbeHead,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_label_f1: Vec<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone)]
struct ProbeParams {
    w1: Array2<f64>,
    b1: Array1<f64>,
    /// Present only for the mlp head.
    w2: Option<Array2<f64>>,
    b2: Option<Array1<f64>>,
}

impl NamedTensors for ProbeParams {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![
            ("probe.w1".to_string(), TensorRef::M(&self.w1)),
            ("probe.b1".to_string(), TensorRef::V(&self.b1)),
        ];
        if let (Some(w2), Some(b2)) = (&self.w2, &self.b2) {
            out.push(("probe.w2".to_string(), TensorRef::M(w2)));
            out.push(("probe.b2".to_string(), TensorRef::V(b2)));
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = vec![
            ("probe.w1".to_string(), TensorMut::M(&mut self.w1)),
            ("probe.b1".to_string(), TensorMut::V(&mut self.b1)),
        ];
        if let (Some(w2), Some(b2)) = (&mut self.w2, &mut self.b2) {
            out.push(("probe.w2".to_string(), TensorMut::M(w2)));
            out.push(("probe.b2".to_string(), TensorMut::V(b2)));
        }
        out
    }
}

impl ProbeParams {
    fn init(head: ProbeHead, dim: usize, hidden: usize, labels: usize, rng: &mut ChaCha8Rng) -> Self {
        let uniform = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut m = Array2::zeros((rows, cols));
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            m
        };
        match head {
            ProbeHead::Linear => ProbeParams {
                w1: uniform(dim, labels, dim, rng),
                b1: Array1::zeros(labels),
                w2: None,
                b2: None,
            },
            ProbeHead::Mlp => ProbeParams {
                w1: uniform(dim, hidden, dim, rng),
                b1: Array1::zeros(hidden),
                w2: Some(uniform(hidden, labels, hidden, rng)),
                b2: Some(Array1::zeros(labels)),
            },
        }
    }

    fn zeros_like(&self) -> Self {
        ProbeParams {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: self.w2.as_ref().map(|w| Array2::zeros(w.dim())),
            b2: self.b2.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    /// Logits for a feature matrix, with the hidden activation when mlp.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut z1 = x.dot(&self.w1);
        for mut row in z1.rows_mut() {
            row += &self.b1;
        }
        match (&self.w2, &self.b2) {
            (Some(w2), Some(b2)) => {
                let hidden = z1.mapv(|v| v.max(0.0));
                let mut logits = hidden.dot(w2);
                for mut row in logits.rows_mut() {
                    row += b2;
                }
                (logits, Some(hidden))
            }
            _ => (z1, None),
        }
    }

    /// Accumulates gradients given d(loss)/d(logits).
    fn backward(
        &self,
        x: &Array2<f64>,
        hidden: &Option<Array2<f64>>,
        d_logits: &Array2<f64>,
        grads: &mut ProbeParams,
    ) {
        match (&self.w2, hidden) {
            (Some(w2), Some(hidden)) => {
                let g_w2 = grads.w2.as_mut().unwrap();
                *g_w2 += &hidden.t().dot(d_logits);
                *grads.b2.as_mut().unwrap() += &d_logits.sum_axis(ndarray::Axis(0));
                let mut d_hidden = d_logits.dot(&w2.t());
                for (dh, &h) in d_hidden.iter_mut().zip(hidden.iter()) {
                    if h <= 0.0 {
                        *dh = 0.0;
                    }
                }
                grads.w1 += &x.t().dot(&d_hidden);
                grads.b1 += &d_hidden.sum_axis(ndarray::Axis(0));
            }
            _ => {
                grads.w1 += &x.t().dot(d_logits);
                grads.b1 += &d_logits.sum_axis(ndarray::Axis(0));
            }
        }
    }
}

/// Feature standardization fitted on the train split.
struct Standardizer {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(ndarray::Axis(0)) / n;
        let mut var = Array1::zeros(x.ncols());
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var /= n;
        let inv_std = var.mapv(|v: f64| 1.0 / v.sqrt().max(1e-8));
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        out
    }
}

/// Predicted label sets from logits.
fn predict(logits: &Array2<f64>, task: TaskKind) -> Vec<Vec<u32>> {
    match task {
        TaskKind::SingleLabel => logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                vec![best as u32]
            })
            .collect(),
        TaskKind::MultiLabel => logits
            .rows()
            .into_iter()
            // sigmoid(z) > 0.5 is z > 0
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0)
                    .map(|(j, _)| j as u32)
                    .collect()
            })
            .collect(),
    }
}

/// Loss and d(loss)/d(logits) for one minibatch.
fn loss_and_grad(
    logits: &Array2<f64>,
    targets: &[Vec<u32>],
    task: TaskKind,
) -> (f64, Array2<f64>) {
    let (n, l) = logits.dim();
    let mut d = Array2::zeros((n, l));
    let mut loss = 0.0;
    match task {
        TaskKind::SingleLabel => {
            // softmax cross-entropy, row-max stabilized
            for i in 0..n {
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let target = targets[i][0] as usize;
                loss += z.ln() + max - row[target];
                for j in 0..l {
                    let p = exps[j] / z;
                    let y = if j == target { 1.0 } else { 0.0 };
                    d[[i, j]] = (p - y) / n as f64;
                }
            }
            loss /= n as f64;
        }
        TaskKind::MultiLabel => {
            // per-label sigmoid binary cross-entropy
            let scale = 1.0 / (n * l) as f64;
            for i in 0..n {
                for j in 0..l {
                    let z = logits[[i, j]];
                    let y = if targets[i].contains(&(j as u32)) { 1.0 } else { 0.0 };
                    loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                    let sig = 1.0 / (1.0 + (-z).exp());
                    d[[i, j]] = (sig - y) * scale;
                }
            }
            loss *= scale;
        }
    }
    (loss, d)
}

/// Trains a probe on frozen embeddings and reports test F1.
///
/// Early stopping tracks dev macro-F1 with the configured patience and
/// restores the best epoch's parameters before scoring the test split.
pub fn train_probe(
    train: &EmbeddingMatrix,
    dev: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    cfg: &ProbeConfig,
    tag: &str,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::Validation("probe splits must be non-empty".into()));
    }
    let task = train.task_kind;
    let num_labels = train.num_labels;
    {
        let mut seen = std::collections::BTreeSet::new();
        for ls in &train.labels {
            seen.extend(ls.iter().copied());
        }
        if seen.len() < 2 {
            return Err(Error::DegenerateTask(format!(
                "training split covers {} distinct label(s); need at least 2",
                seen.len()
            )));
        }
    }

    let standardizer = Standardizer::fit(&train.rows);
    let x_train = standardizer.apply(&train.rows);
    let x_dev = standardizer.apply(&dev.rows);
    let x_test = standardizer.apply(&test.rows);

    let mut rng = seeded(derive_seed(cfg.seed, "probe-init"));
    let mut params = ProbeParams::init(cfg.head, train.dim(), cfg.hidden, num_labels, &mut rng);
    let mut m1 = params.zeros_like();
    let mut m2 = params.zeros_like();
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };

    let n = x_train.nrows();
    let mut best_macro = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut bad_epochs = 0usize;
    let mut t: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = substream(derive_seed(cfg.seed, "probe-order"), epoch as u64);
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let xb = select_rows(&x_train, chunk);
            let yb: Vec<Vec<u32>> = chunk.iter().map(|&i| train.labels[i].clone()).collect();
            let (logits, hidden) = params.forward(&xb);
            let (_, d_logits) = loss_and_grad(&logits, &yb, task);
            let mut grads = params.zeros_like();
            params.backward(&xb, &hidden, &d_logits, &mut grads);
            t += 1;
            adamw_step(&mut params, &grads, &mut m1, &mut m2, t, &adam)?;
        }

        let (dev_logits, _) = params.forward(&x_dev);
        let dev_pred = predict(&dev_logits, task);
        let dev_f1 = f1_scores(&dev_pred, &dev.labels, task, num_labels);
        if dev_f1.macro_f1 > best_macro {
            best_macro = dev_f1.macro_f1;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    let (test_logits, _) = best_params.forward(&x_test);
    let test_pred = predict(&test_logits, task);
    let scores = f1_scores(&test_pred, &test.labels, task, num_labels);
    Ok(ProbeReport {
        tag: tag.to_string(),
        head: cfg.head,
        micro_f1: scores.micro,
        macro_f1: scores.macro_f1,
        per_label_f1: scores.per_label,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

pub(crate) fn select_rows(x: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), x.ncols()));
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

