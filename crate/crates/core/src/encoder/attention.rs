//! Sliding-window attention with a global first position.
//!
//! Token i > 0 attends to [i - w/2, i + w/2] plus position 0; position 0
//! attends to every token. The first position plays the global role: its
//! outgoing query and its key/value as a target come from the separate
//! `_g` projections, so score computation touches at most n(w+1) + 2n
//! token pairs.

use ndarray::{Array1, Array2};

use super::LayerParams;
use crate::error::{Error, Result};

/// Instrumentation for the locality bound.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnStats {
    pub pairs_visited: usize,
}

/// Forward cache for one attention pass.
pub struct AttnCache {
    pub(crate) h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    qg0: Array1<f64>,
    kg: Array2<f64>,
    vg: Array2<f64>,
    rows: Vec<RowAttn>,
    ctx: Array2<f64>,
}

struct RowAttn {
    targets: Vec<usize>,
    probs: Vec<f64>,
}

impl AttnCache {
    /// Reconstructs the dense attention-probability matrix; positions that
    /// were never scored stay exactly zero. Test support.
    pub fn dense_probs(&self) -> Array2<f64> {
        let n = self.h.nrows();
        let mut dense = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for (t, &j) in row.targets.iter().enumerate() {
                dense[[i, j]] = row.probs[t];
            }
        }
        dense
    }
}

/// Attention targets for a non-global row.
fn window_targets(i: usize, n: usize, half: usize) -> Vec<usize> {
    let start = i.saturating_sub(half);
    let end = (i + half).min(n - 1);
    let mut targets = Vec::with_capacity(end - start + 2);
    if start > 0 {
        targets.push(0);
    }
    targets.extend(start..=end);
    targets
}

/// One attention pass over `h` (n x d): output, cache, and visit counter.
pub fn sliding_window_attention(
    h: &Array2<f64>,
    layer: &LayerParams,
    window: usize,
    max_len: usize,
) -> Result<(Array2<f64>, AttnCache, AttnStats)> {
    let n = h.nrows();
    let d = h.ncols();
    if n > max_len {
        return Err(Error::InputTooLong { len: n, max_len });
    }
    assert!(n >= 1, "attention needs at least one row");
    let half = window / 2;
    let scale = 1.0 / (d as f64).sqrt();

    let q = h.dot(&layer.w_q);
    let k = h.dot(&layer.w_k);
    let v = h.dot(&layer.w_v);
    let kg = h.dot(&layer.w_kg);
    let vg = h.dot(&layer.w_vg);
    let qg0 = h.row(0).dot(&layer.w_qg);

    let mut stats = AttnStats::default();
    let mut ctx = Array2::zeros((n, d));
    let mut rows = Vec::with_capacity(n);

    // Global row: position 0 attends to every token through the global
    // projections.
    {
        let targets: Vec<usize> = (0..n).collect();
        let mut scores = Vec::with_capacity(n);
        for &j in &targets {
            scores.push(qg0.dot(&kg.row(j)) * scale);
        }
        stats.pairs_visited += targets.len();
        let probs = softmax(&scores);
        for (t, &j) in targets.iter().enumerate() {
            let p = probs[t];
            for c in 0..d {
                ctx[[0, c]] += p * vg[[j, c]];
            }
        }
        rows.push(RowAttn { targets, probs });
    }

    for i in 1..n {
        let targets = window_targets(i, n, half);
        let qi = q.row(i);
        let mut scores = Vec::with_capacity(targets.len());
        for &j in &targets {
            let key = if j == 0 { kg.row(0) } else { k.row(j) };
            scores.push(qi.dot(&key) * scale);
        }
        stats.pairs_visited += targets.len();
        let probs = softmax(&scores);
        for (t, &j) in targets.iter().enumerate() {
            let p = probs[t];
            let val = if j == 0 { vg.row(0) } else { v.row(j) };
            for c in 0..d {
                ctx[[i, c]] += p * val[c];
            }
        }
        rows.push(RowAttn { targets, probs });
    }

    let out = ctx.dot(&layer.w_o);
    let cache = AttnCache {
        h: h.clone(),
        q,
        k,
        v,
        qg0,
        kg,
        vg,
        rows,
        ctx,
    };
    Ok((out, cache, stats))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Backpropagates `d_out` through the attention pass, accumulating weight
/// gradients into `grads` and returning the gradient on `h`.
pub(crate) fn attention_backward(
    layer: &LayerParams,
    cache: &AttnCache,
    d_out: &Array2<f64>,
    grads: &mut LayerParams,
) -> Array2<f64> {
    let n = cache.h.nrows();
    let d = cache.h.ncols();
    let scale = 1.0 / (d as f64).sqrt();

    grads.w_o += &cache.ctx.t().dot(d_out);
    let d_ctx = d_out.dot(&layer.w_o.t());

    let mut d_q = Array2::zeros((n, d));
    let mut d_k = Array2::zeros((n, d));
    let mut d_v = Array2::zeros((n, d));
    let mut d_qg0: Array1<f64> = Array1::zeros(d);
    let mut d_kg = Array2::zeros((n, d));
    let mut d_vg = Array2::zeros((n, d));

    for (i, row) in cache.rows.iter().enumerate() {
        let t_count = row.targets.len();
        // d alpha_t = <d_ctx_i, value_t>, then softmax backward:
        // d score_t = alpha_t (d alpha_t - sum_l alpha_l d alpha_l)
        let mut d_alpha = vec![0.0; t_count];
        for (t, &j) in row.targets.iter().enumerate() {
            let val = if i == 0 || j == 0 {
                cache.vg.row(j)
            } else {
                cache.v.row(j)
            };
            let mut dot = 0.0;
            for c in 0..d {
                dot += d_ctx[[i, c]] * val[c];
            }
            d_alpha[t] = dot;
        }
        let weighted: f64 = row
            .probs
            .iter()
            .zip(d_alpha.iter())
            .map(|(p, da)| p * da)
            .sum();

        for (t, &j) in row.targets.iter().enumerate() {
            let p = row.probs[t];
            let d_score = p * (d_alpha[t] - weighted);
            // value gradient
            if i == 0 || j == 0 {
                for c in 0..d {
                    d_vg[[j, c]] += p * d_ctx[[i, c]];
                }
            } else {
                for c in 0..d {
                    d_v[[j, c]] += p * d_ctx[[i, c]];
                }
            }
            // score = <query_i, key_j> * scale
            if i == 0 {
                for c in 0..d {
                    d_qg0[c] += d_score * cache.kg[[j, c]] * scale;
                    d_kg[[j, c]] += d_score * cache.qg0[c] * scale;
                }
            } else if j == 0 {
                for c in 0..d {
                    d_q[[i, c]] += d_score * cache.kg[[0, c]] * scale;
                    d_kg[[0, c]] += d_score * cache.q[[i, c]] * scale;
                }
            } else {
                for c in 0..d {
                    d_q[[i, c]] += d_score * cache.k[[j, c]] * scale;
                    d_k[[j, c]] += d_score * cache.q[[i, c]] * scale;
                }
            }
        }
    }

    // Projection backward: x = h . W  =>  dW += h^T dx, dh += dx W^T
    let h = &cache.h;
    grads.w_q += &h.t().dot(&d_q);
    grads.w_k += &h.t().dot(&d_k);
    grads.w_v += &h.t().dot(&d_v);
    grads.w_kg += &h.t().dot(&d_kg);
    grads.w_vg += &h.t().dot(&d_vg);
    let mut d_h = d_q.dot(&layer.w_q.t());
    d_h += &d_k.dot(&layer.w_k.t());
    d_h += &d_v.dot(&layer.w_v.t());
    d_h += &d_kg.dot(&layer.w_kg.t());
    d_h += &d_vg.dot(&layer.w_vg.t());

    // qg0 = h_0 . W_qg touches only row 0.
    for a in 0..d {
        for b in 0..d {
            grads.w_qg[[a, b]] += h[[0, a]] * d_qg0[b];
            d_h[[0, a]] += d_qg0[b] * layer.w_qg[[a, b]];
        }
    }

    d_h
}
