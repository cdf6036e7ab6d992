//! Micro/macro F1 over label-set predictions.

use crate::corpus::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_f1: f64,
    pub per_label: Vec<f64>,
}

/// F1 from per-label confusion counts pooled over documents.
///
/// Predictions and gold are label sets (singletons for single-label
/// tasks). Per-label F1 is 2PR/(P+R), defined as 0 when P+R = 0; micro
/// pools TP/FP/FN over all labels; macro is the unweighted mean of the
/// per-label scores across all `num_labels` labels.
pub fn f1_scores(
    predictions: &[Vec<u32>],
    gold: &[Vec<u32>],
    task_kind: TaskKind,
    num_labels: usize,
) -> F1Scores {
    assert_eq!(
        predictions.len(),
        gold.len(),
        "predictions and gold must have equal length"
    );
    if task_kind == TaskKind::SingleLabel {
        debug_assert!(gold.iter().all(|g| g.len() == 1));
    }

    let mut tp = vec![0u64; num_labels];
    let mut fp = vec![0u64; num_labels];
    let mut fn_ = vec![0u64; num_labels];
    for (pred, gold) in predictions.iter().zip(gold.iter()) {
        for &p in pred {
            let p = p as usize;
            if gold.contains(&(p as u32)) {
                tp[p] += 1;
            } else {
                fp[p] += 1;
            }
        }
        for &g in gold {
            if !pred.contains(&g) {
                fn_[g as usize] += 1;
            }
        }
    }

    let per_label: Vec<f64> = (0..num_labels)
        .map(|l| f1(tp[l], fp[l], fn_[l]))
        .collect();
    let macro_f1 = per_label.iter().sum::<f64>() / num_labels.max(1) as f64;
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    F1Scores {
        micro,
        macro_f1,
        per_label,
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}
