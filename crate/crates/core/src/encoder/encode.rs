//! Document encoding: augmentation, the forward pipeline with its trace,
//! and manual backpropagation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_backward, sliding_window_attention, AttnCache, AttnStats};
use super::{EncoderConfig, EncoderParams, Pooling};
use crate::corpus::{CLS_ID, MASK_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Replaces each position after the first with MASK at rate `mask_rate`.
///
/// Position 0 carries CLS and is never masked; length is preserved.
pub fn augment(token_ids: &[u32], mask_rate: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    assert!((0.0..1.0).contains(&mask_rate), "mask_rate must be in [0, 1)");
    let mut out = token_ids.to_vec();
    if mask_rate == 0.0 {
        return out;
    }
    for t in out.iter_mut().skip(1) {
        if rng.random_bool(mask_rate) {
            *t = MASK_ID;
        }
    }
    out
}

/// Reduction of token states to one vector.
///
/// PAD positions are excluded through `valid`; `mean` averages valid rows,
/// `max` takes per-dimension maxima over them, `cls` returns row 0.
pub fn pool(h: &Array2<f64>, mode: Pooling, valid: &[bool]) -> Result<(Array1<f64>, PoolCache)> {
    let (n, d) = h.dim();
    assert_eq!(valid.len(), n, "validity mask length mismatch");
    let valid_rows: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if valid_rows.is_empty() {
        return Err(Error::Validation("all positions are PAD".into()));
    }
    match mode {
        Pooling::Mean => {
            let mut out = Array1::zeros(d);
            for &i in &valid_rows {
                for c in 0..d {
                    out[c] += h[[i, c]];
                }
            }
            out /= valid_rows.len() as f64;
            Ok((
                out,
                PoolCache::Mean {
                    valid: valid_rows,
                    n,
                    d,
                },
            ))
        }
        Pooling::Max => {
            let mut out = Array1::from_elem(d, f64::NEG_INFINITY);
            let mut argmax = vec![valid_rows[0]; d];
            for &i in &valid_rows {
                for c in 0..d {
                    if h[[i, c]] > out[c] {
                        out[c] = h[[i, c]];
                        argmax[c] = i;
                    }
                }
            }
            Ok((out, PoolCache::Max { argmax, n, d }))
        }
        Pooling::Cls => {
            if !valid[0] {
                return Err(Error::Validation("CLS position is PAD".into()));
            }
            Ok((h.row(0).to_owned(), PoolCache::Cls { n, d }))
        }
    }
}

#[derive(Debug, Clone)]
pub enum PoolCache {
    Mean { valid: Vec<usize>, n: usize, d: usize },
    Max { argmax: Vec<usize>, n: usize, d: usize },
    Cls { n: usize, d: usize },
}

pub fn pool_backward(cache: &PoolCache, d_pooled: &Array1<f64>) -> Array2<f64> {
    match cache {
        PoolCache::Mean { valid, n, d } => {
            let mut out = Array2::zeros((*n, *d));
            let scale = 1.0 / valid.len() as f64;
            for &i in valid {
                for c in 0..*d {
                    out[[i, c]] = d_pooled[c] * scale;
                }
            }
            out
        }
        PoolCache::Max { argmax, n, d } => {
            let mut out = Array2::zeros((*n, *d));
            for c in 0..*d {
                out[[argmax[c], c]] += d_pooled[c];
            }
            out
        }
        PoolCache::Cls { n, d } => {
            let mut out = Array2::zeros((*n, *d));
            for c in 0..*d {
                out[[0, c]] = d_pooled[c];
            }
            out
        }
    }
}

struct LayerTrace {
    attn_cache: AttnCache,
    attn_drop: Option<Array2<f64>>,
    h_mid: Array2<f64>,
    z1: Array2<f64>,
    r: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

/// Forward cache of one document encoding.
pub struct EncodeTrace {
    /// Ids actually embedded: CLS followed by (possibly masked) tokens.
    pub ids: Vec<u32>,
    pub stats: AttnStats,
    layers: Vec<LayerTrace>,
    pool_cache: PoolCache,
    pooled: Array1<f64>,
    proj_z: Array1<f64>,
    proj_hidden: Array1<f64>,
}

impl EncodeTrace {
    /// Dense attention probabilities of layer `layer` (test support).
    pub fn dense_attention_probs(&self, layer: usize) -> Array2<f64> {
        self.layers[layer].attn_cache.dense_probs()
    }

    /// Smallest |pre-activation| across relu layers (test support for
    /// finite-difference conditioning).
    pub fn min_relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for l in &self.layers {
            for &z in l.z1.iter() {
                margin = margin.min(z.abs());
            }
        }
        for &z in self.proj_z.iter() {
            margin = margin.min(z.abs());
        }
        margin
    }
}

fn dropout_mask(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Array2<f64>> {
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Array2::zeros((rows, cols));
    for v in mask.iter_mut() {
        *v = if rng.random_bool(p) { 0.0 } else { keep };
    }
    Some(mask)
}

/// Encodes a token sequence into its projection vector.
///
/// A CLS id is prepended; train mode applies token masking and dropout and
/// requires an RNG, eval mode is deterministic. Errors when the sequence
/// (with CLS) exceeds `max_len` or contains out-of-vocabulary ids.
pub fn encode(
    token_ids: &[u32],
    params: &EncoderParams,
    config: &EncoderConfig,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array1<f64>, EncodeTrace)> {
    if token_ids.is_empty() {
        return Err(Error::Validation("cannot encode an empty document".into()));
    }
    let n = token_ids.len() + 1;
    if n > config.max_len {
        return Err(Error::InputTooLong {
            len: n,
            max_len: config.max_len,
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }

    let mut ids = Vec::with_capacity(n);
    ids.push(CLS_ID);
    ids.extend_from_slice(token_ids);
    if mode == Mode::Train {
        let rng = rng
            .as_deref_mut()
            .expect("train-mode encode requires an RNG");
        ids = augment(&ids, config.mask_rate, rng);
    }

    let d = config.embed_dim;
    let mut h = Array2::zeros((n, d));
    for (i, &t) in ids.iter().enumerate() {
        h.row_mut(i).assign(&params.token_embeddings.row(t as usize));
    }

    let mut stats = AttnStats::default();
    let mut layers = Vec::with_capacity(config.num_layers);
    for layer in &params.layers {
        let (attn_out, attn_cache, layer_stats) =
            sliding_window_attention(&h, layer, config.window, config.max_len)?;
        stats.pairs_visited += layer_stats.pairs_visited;

        let attn_drop = match mode {
            Mode::Train => dropout_mask(n, d, config.dropout_p, rng.as_deref_mut().unwrap()),
            Mode::Eval => None,
        };
        let dropped = match &attn_drop {
            Some(mask) => &attn_out * mask,
            None => attn_out,
        };
        let h_mid = &h + &dropped;

        let mut z1 = h_mid.dot(&layer.ffn_w1);
        for mut row in z1.rows_mut() {
            row += &layer.ffn_b1;
        }
        let r = z1.mapv(|v| v.max(0.0));
        let mut ffn_out = r.dot(&layer.ffn_w2);
        for mut row in ffn_out.rows_mut() {
            row += &layer.ffn_b2;
        }
        let ffn_drop = match mode {
            Mode::Train => dropout_mask(n, d, config.dropout_p, rng.as_deref_mut().unwrap()),
            Mode::Eval => None,
        };
        let dropped = match &ffn_drop {
            Some(mask) => &ffn_out * mask,
            None => ffn_out,
        };
        let h_out = &h_mid + &dropped;

        layers.push(LayerTrace {
            attn_cache,
            attn_drop,
            h_mid,
            z1,
            r,
            ffn_drop,
        });
        h = h_out;
    }

    let valid = vec![true; n];
    let (pooled, pool_cache) = pool(&h, config.pooling, &valid)?;

    let proj_z = pooled.dot(&params.proj_w1) + &params.proj_b1;
    let proj_hidden = proj_z.mapv(|v| v.max(0.0));
    let s = proj_hidden.dot(&params.proj_w2) + &params.proj_b2;

    Ok((
        s,
        EncodeTrace {
            ids,
            stats,
            layers,
            pool_cache,
            pooled,
            proj_z,
            proj_hidden,
        },
    ))
}

/// Backpropagates `d_s` through an encode trace, accumulating into `grads`.
pub fn encode_backward(
    trace: &EncodeTrace,
    params: &EncoderParams,
    config: &EncoderConfig,
    d_s: &Array1<f64>,
    grads: &mut EncoderParams,
) {
    // projector: s = relu(pooled W1 + b1) W2 + b2
    for a in 0..config.proj_dim {
        for b in 0..config.proj_dim {
            grads.proj_w2[[a, b]] += trace.proj_hidden[a] * d_s[b];
        }
    }
    grads.proj_b2 += d_s;
    let mut d_hidden = params.proj_w2.dot(d_s);
    for (dh, &z) in d_hidden.iter_mut().zip(trace.proj_z.iter()) {
        if z <= 0.0 {
            *dh = 0.0;
        }
    }
    for a in 0..config.embed_dim {
        for b in 0..config.proj_dim {
            grads.proj_w1[[a, b]] += trace.pooled[a] * d_hidden[b];
        }
    }
    grads.proj_b1 += &d_hidden;
    let d_pooled = params.proj_w1.dot(&d_hidden);

    let mut d_h = pool_backward(&trace.pool_cache, &d_pooled);

    for (layer_idx, lt) in trace.layers.iter().enumerate().rev() {
        let layer = &params.layers[layer_idx];
        let g_layer = &mut grads.layers[layer_idx];

        // h_out = h_mid + drop(ffn_out)
        let d_ffn_out = match &lt.ffn_drop {
            Some(mask) => &d_h * mask,
            None => d_h.clone(),
        };
        let mut d_h_mid = d_h;

        // ffn_out = relu(h_mid W1 + b1) W2 + b2
        g_layer.ffn_w2 += &lt.r.t().dot(&d_ffn_out);
        g_layer.ffn_b2 += &d_ffn_out.sum_axis(ndarray::Axis(0));
        let mut d_z1 = d_ffn_out.dot(&layer.ffn_w2.t());
        for (dz, &z) in d_z1.iter_mut().zip(lt.z1.iter()) {
            if z <= 0.0 {
                *dz = 0.0;
            }
        }
        g_layer.ffn_w1 += &lt.h_mid.t().dot(&d_z1);
        g_layer.ffn_b1 += &d_z1.sum_axis(ndarray::Axis(0));
        d_h_mid += &d_z1.dot(&layer.ffn_w1.t());

        // h_mid = h_in + drop(attn_out)
        let d_attn_out = match &lt.attn_drop {
            Some(mask) => &d_h_mid * mask,
            None => d_h_mid.clone(),
        };
        let mut d_h_in = d_h_mid;
        d_h_in += &attention_backward(layer, &lt.attn_cache, &d_attn_out, g_layer);
        d_h = d_h_in;
    }

    for (i, &t) in trace.ids.iter().enumerate() {
        let mut row = grads.token_embeddings.row_mut(t as usize);
        for c in 0..config.embed_dim {
            row[c] += d_h[[i, c]];
        }
    }
}

/// A document's projection vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbedding {
    pub vector: Array1<f64>,
    pub source_doc: String,
}

/// Encodes one document (convenience wrapper over [`encode`]).
pub fn encode_document(
    doc: &crate::corpus::Document,
    params: &EncoderParams,
    config: &EncoderConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DocEmbedding> {
    let (vector, _) = encode(&doc.token_ids, params, config, mode, rng)?;
    Ok(DocEmbedding {
        vector,
        source_doc: doc.id.clone(),
    })
}

/// The two augmented views of one batch.
pub struct PairForward {
    pub s_a: Array2<f64>,
    pub s_b: Array2<f64>,
    pub traces_a: Vec<EncodeTrace>,
    pub traces_b: Vec<EncodeTrace>,
}

/// Encodes every sequence twice in train mode, producing independently
/// augmented row pairs (row i of `s_a` and `s_b` are views of sequence i).
pub fn forward_pair(
    batch: &[&[u32]],
    params: &EncoderParams,
    config: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairForward> {
    assert!(!batch.is_empty(), "forward_pair needs at least one document");
    let n = batch.len();
    let mut s_a = Array2::zeros((n, config.proj_dim));
    let mut s_b = Array2::zeros((n, config.proj_dim));
    let mut traces_a = Vec::with_capacity(n);
    let mut traces_b = Vec::with_capacity(n);
    for (i, tokens) in batch.iter().enumerate() {
        let (va, ta) = encode(tokens, params, config, Mode::Train, Some(rng))?;
        let (vb, tb) = encode(tokens, params, config, Mode::Train, Some(rng))?;
        s_a.row_mut(i).assign(&va);
        s_b.row_mut(i).assign(&vb);
        traces_a.push(ta);
        traces_b.push(tb);
    }
    Ok(PairForward {
        s_a,
        s_b,
        traces_a,
        traces_b,
    })
}
