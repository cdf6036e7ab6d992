//! Few-shot probing: per-class subsampling of the training split,
//! repeated over seeds, aggregated as mean and standard deviation.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::probe::{select_rows, train_probe, ProbeConfig, ProbeReport};
use super::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    pub tag: String,
    pub shots_per_class: usize,
    pub seeds: Vec<u64>,
    pub mean_micro_f1: f64,
    pub sd_micro_f1: f64,
    pub mean_macro_f1: f64,
    pub sd_macro_f1: f64,
    pub reports: Vec<ProbeReport>,
}

/// Samples `shots_per_class` training examples per class for each derived
/// seed, trains a probe on the sample, and scores the full test split.
///
/// Document order inside a sample follows the original split order, so a
/// sample covering the whole split reproduces `train_probe` exactly.
pub fn fewshot_eval(
    train: &EmbeddingMatrix,
    dev: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    shots_per_class: usize,
    num_seeds: usize,
    cfg: &ProbeConfig,
    tag: &str,
) -> Result<FewshotReport> {
    if shots_per_class < 1 {
        return Err(Error::Config("shots_per_class must be >= 1".into()));
    }
    if num_seeds < 1 {
        return Err(Error::Config("num_seeds must be >= 1".into()));
    }

    // Class membership over the training split.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); train.num_labels];
    for (i, labels) in train.labels.iter().enumerate() {
        for &l in labels {
            members[l as usize].push(i);
        }
    }
    for (label, m) in members.iter().enumerate() {
        if m.len() < shots_per_class {
            return Err(Error::InsufficientClass {
                label,
                have: m.len(),
                need: shots_per_class,
            });
        }
    }

    let seeds: Vec<u64> = (0..num_seeds)
        .map(|i| derive_seed(cfg.seed, &format!("fewshot{i}")))
        .collect();

    let mut reports = Vec::with_capacity(num_seeds);
    for &seed in &seeds {
        let mut rng = seeded(seed);
        let mut chosen = BTreeSet::new();
        for m in &members {
            let mut pool = m.clone();
            for i in 0..shots_per_class {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            chosen.extend(pool[..shots_per_class].iter().copied());
        }
        let indices: Vec<usize> = chosen.into_iter().collect();
        let sample = EmbeddingMatrix {
            rows: select_rows(&train.rows, &indices),
            doc_ids: indices.iter().map(|&i| train.doc_ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| train.labels[i].clone()).collect(),
            task_kind: train.task_kind,
            num_labels: train.num_labels,
        };
        let probe_cfg = ProbeConfig { seed, ..cfg.clone() };
        reports.push(train_probe(&sample, dev, test, &probe_cfg, tag)?);
    }

    let micros: Vec<f64> = reports.iter().map(|r| r.micro_f1).collect();
    let macros: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let (mean_micro_f1, sd_micro_f1) = mean_sd(&micros);
    let (mean_macro_f1, sd_macro_f1) = mean_sd(&macros);
    Ok(FewshotReport {
        tag: tag.to_string(),
        shots_per_class,
        seeds,
        mean_micro_f1,
        sd_micro_f1,
        mean_macro_f1,
        sd_macro_f1,
        reports,
    })
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
