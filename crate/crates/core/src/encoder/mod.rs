//! Windowed-attention document encoder.
//!
//! Pipeline: token embedding -> num_layers x (sliding-window attention with
//! a global first position + residual, feed-forward + residual) -> pooling
//! -> two-layer projector. Train mode adds token masking and dropout; eval
//! mode is a pure function of (token ids, parameters).

mod attention;
mod encode;

pub use attention::{sliding_window_attention, AttnCache, AttnStats};
pub use encode::{
    augment, encode, encode_backward, encode_document, forward_pair, pool, pool_backward,
    DocEmbedding, EncodeTrace, Mode, PairForward, PoolCache,
};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{NamedTensors, TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::Config(format!(
                "unknown pooling {other:?} (expected mean, max, or cls)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Mean => write!(f, "mean"),
            Pooling::Max => write!(f, "max"),
            Pooling::Cls => write!(f, "cls"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Attention window width; each token reaches window/2 on either side.
    pub window: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    /// Probability of replacing a token with MASK in train mode.
    pub mask_rate: f64,
    pub proj_dim: usize,
    pub pooling: Pooling,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 2048,
            embed_dim: 16,
            num_layers: 1,
            window: 8,
            ffn_dim: 32,
            dropout_p: 0.1,
            mask_rate: 0.15,
            proj_dim: 16,
            pooling: Pooling::Mean,
            max_len: 4096,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 != 0 || self.window < 2 || self.window > self.max_len {
            return Err(Error::Config(format!(
                "window must be even and in [2, max_len={}], got {}",
                self.max_len, self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must be in [0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.embed_dim < 2 || self.proj_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim and proj_dim must be >= 2, got {} and {}",
                self.embed_dim, self.proj_dim
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover the specials".into()));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.ffn_dim < 1 {
            return Err(Error::Config("ffn_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One attention + feed-forward block.
///
/// The `_g` matrices are the separate projections used when the global
/// first position attends (its query) and is attended (its key/value).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_qg: Array2<f64>,
    pub w_kg: Array2<f64>,
    pub w_vg: Array2<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub proj_w1: Array2<f64>,
    pub proj_b1: Array1<f64>,
    pub proj_w2: Array2<f64>,
    pub proj_b2: Array1<f64>,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    m
}

impl EncoderParams {
    /// Scaled-uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let m = config.proj_dim;
        let token_embeddings = uniform(config.vocab_size, d, d, rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                w_q: uniform(d, d, d, rng),
                w_k: uniform(d, d, d, rng),
                w_v: uniform(d, d, d, rng),
                w_o: uniform(d, d, d, rng),
                w_qg: uniform(d, d, d, rng),
                w_kg: uniform(d, d, d, rng),
                w_vg: uniform(d, d, d, rng),
                ffn_w1: uniform(d, f, d, rng),
                ffn_b1: Array1::zeros(f),
                ffn_w2: uniform(f, d, f, rng),
                ffn_b2: Array1::zeros(d),
            });
        }
        Ok(EncoderParams {
            token_embeddings,
            layers,
            proj_w1: uniform(d, m, d, rng),
            proj_b1: Array1::zeros(m),
            proj_w2: uniform(m, m, m, rng),
            proj_b2: Array1::zeros(m),
        })
    }

    /// Zero-valued clone of the parameter layout (gradient container).
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let m = config.proj_dim;
        EncoderParams {
            token_embeddings: Array2::zeros((config.vocab_size, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    w_q: Array2::zeros((d, d)),
                    w_k: Array2::zeros((d, d)),
                    w_v: Array2::zeros((d, d)),
                    w_o: Array2::zeros((d, d)),
                    w_qg: Array2::zeros((d, d)),
                    w_kg: Array2::zeros((d, d)),
                    w_vg: Array2::zeros((d, d)),
                    ffn_w1: Array2::zeros((d, f)),
                    ffn_b1: Array1::zeros(f),
                    ffn_w2: Array2::zeros((f, d)),
                    ffn_b2: Array1::zeros(d),
                })
                .collect(),
            proj_w1: Array2::zeros((d, m)),
            proj_b1: Array1::zeros(m),
            proj_w2: Array2::zeros((m, m)),
            proj_b2: Array1::zeros(m),
        }
    }
}

impl NamedTensors for EncoderParams {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![(
            "encoder.token_embeddings".to_string(),
            TensorRef::M(&self.token_embeddings),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.layer{i}.w_q"), TensorRef::M(&l.w_q)));
            out.push((format!("encoder.layer{i}.w_k"), TensorRef::M(&l.w_k)));
            out.push((format!("encoder.layer{i}.w_v"), TensorRef::M(&l.w_v)));
            out.push((format!("encoder.layer{i}.w_o"), TensorRef::M(&l.w_o)));
            out.push((format!("encoder.layer{i}.w_qg"), TensorRef::M(&l.w_qg)));
            out.push((format!("encoder.layer{i}.w_kg"), TensorRef::M(&l.w_kg)));
            out.push((format!("encoder.layer{i}.w_vg"), TensorRef::M(&l.w_vg)));
            out.push((format!("encoder.layer{i}.ffn_w1"), TensorRef::M(&l.ffn_w1)));
            out.push((format!("encoder.layer{i}.ffn_b1"), TensorRef::V(&l.ffn_b1)));
            out.push((format!("encoder.layer{i}.ffn_w2"), TensorRef::M(&l.ffn_w2)));
            out.push((format!("encoder.layer{i}.ffn_b2"), TensorRef::V(&l.ffn_b2)));
        }
        out.push(("encoder.proj.w1".to_string(), TensorRef::M(&self.proj_w1)));
        out.push(("encoder.proj.b1".to_string(), TensorRef::V(&self.proj_b1)));
        out.push(("encoder.proj.w2".to_string(), TensorRef::M(&self.proj_w2)));
        out.push(("encoder.proj.b2".to_string(), TensorRef::V(&self.proj_b2)));
        out
    }

    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = vec![(
            "encoder.token_embeddings".to_string(),
            TensorMut::M(&mut self.token_embeddings),
        )];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("encoder.layer{i}.w_q"), TensorMut::M(&mut l.w_q)));
            out.push((format!("encoder.layer{i}.w_k"), TensorMut::M(&mut l.w_k)));
            out.push((format!("encoder.layer{i}.w_v"), TensorMut::M(&mut l.w_v)));
            out.push((format!("encoder.layer{i}.w_o"), TensorMut::M(&mut l.w_o)));
            out.push((format!("encoder.layer{i}.w_qg"), TensorMut::M(&mut l.w_qg)));
            out.push((format!("encoder.layer{i}.w_kg"), TensorMut::M(&mut l.w_kg)));
            out.push((format!("encoder.layer{i}.w_vg"), TensorMut::M(&mut l.w_vg)));
            out.push((format!("encoder.layer{i}.ffn_w1"), TensorMut::M(&mut l.ffn_w1)));
            out.push((format!("encoder.layer{i}.ffn_b1"), TensorMut::V(&mut l.ffn_b1)));
            out.push((format!("encoder.layer{i}.ffn_w2"), TensorMut::M(&mut l.ffn_w2)));
            out.push((format!("encoder.layer{i}.ffn_b2"), TensorMut::V(&mut l.ffn_b2)));
        }
        out.push(("encoder.proj.w1".to_string(), TensorMut::M(&mut self.proj_w1)));
        out.push(("encoder.proj.b1".to_string(), TensorMut::V(&mut self.proj_b1)));
        out.push(("encoder.proj.w2".to_string(), TensorMut::M(&mut self.proj_w2)));
        out.push(("encoder.proj.b2".to_string(), TensorMut::V(&mut self.proj_b2)));
        out
    }
}
