//! Deterministic pretraining: siamese forward, combined loss, AdamW, and
//! checkpoint emission.

mod adamw;
mod checkpoint;
mod gradcheck;

pub use adamw::{adamw_step, AdamConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, LossRecord, RngState, TrainSettings,
    CHECKPOINT_VERSION,
};
pub use gradcheck::grad_check;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, Corpus};
use crate::encoder::{encode_backward, forward_pair, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives::{
    bregman_loss, cosine_sim_matrix, mnr_loss, total_loss, EnsembleConfig, EnsembleParams,
    LossBreakdown, SubnetEnsemble,
};
use crate::rng::{derive_seed, substream};
use crate::tensors::{NamedTensors, TensorMut, TensorRef};

/// Trainable state: encoder plus scoring ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub ensemble: SubnetEnsemble,
}

impl Model {
    pub fn init(
        enc_cfg: &EncoderConfig,
        ens_cfg: &EnsembleConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Model {
            encoder: EncoderParams::init(enc_cfg, rng)?,
            ensemble: SubnetEnsemble::init(*ens_cfg, rng)?,
        })
    }

    pub fn zeros(enc_cfg: &EncoderConfig, ens_cfg: &EnsembleConfig) -> Self {
        Model {
            encoder: EncoderParams::zeros(enc_cfg),
            ensemble: SubnetEnsemble::zeros(ens_cfg),
        }
    }
}

impl NamedTensors for Model {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = self.encoder.trainable();
        out.extend(self.ensemble.trainable());
        out
    }

    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = self.encoder.trainable_mut();
        out.extend(self.ensemble.trainable_mut());
        out
    }

    fn state(&self) -> Vec<(String, TensorRef<'_>)> {
        self.ensemble.state()
    }

    fn state_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        self.ensemble.state_mut()
    }

    fn all_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = self.encoder.trainable_mut();
        out.extend(self.ensemble.all_mut());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SimCse,
    SimCseBregman,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simcse" => Ok(TrainMode::SimCse),
            "simcse+bregman" => Ok(TrainMode::SimCseBregman),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected simcse or simcse+bregman)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::SimCse => write!(f, "simcse"),
            TrainMode::SimCseBregman => write!(f, "simcse+bregman"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub lambda: f64,
    pub sigma: f64,
    pub temperature: f64,
    pub checkpoint_every: u64,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 3e-5,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 42,
            lambda: 2.0,
            sigma: 2.0,
            temperature: 0.1,
            checkpoint_every: 500,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
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
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

/// Training failure carrying the most recent good checkpoint, if any.
#[derive(Debug)]
pub struct PretrainError {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

impl std::fmt::Display for PretrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for PretrainError {}

impl From<Error> for PretrainError {
    fn from(error: Error) -> Self {
        PretrainError {
            error,
            last_good: None,
        }
    }
}

/// Fresh random model wrapped in a step-0 checkpoint (the untrained
/// baseline for probe comparisons).
pub fn init_checkpoint(
    enc_cfg: &EncoderConfig,
    ens_cfg: &EnsembleConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut init_rng = substream(derive_seed(cfg.seed, "init"), 0);
    let model = Model::init(enc_cfg, ens_cfg, &mut init_rng)?;
    let noise_rng = substream(derive_seed(cfg.seed, "noise"), 0);
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        step: 0,
        encoder_config: *enc_cfg,
        ensemble_config: *ens_cfg,
        train_settings: TrainSettings {
            temperature: cfg.temperature,
            sigma: cfg.sigma,
            lambda: cfg.lambda,
        },
        adam_m: Model::zeros(enc_cfg, ens_cfg),
        adam_v: Model::zeros(enc_cfg, ens_cfg),
        model,
        rng_state: RngState::capture(&noise_rng),
        loss_history: Vec::new(),
        subnet_grad_l2: vec![0.0; ens_cfg.subnets],
    })
}

/// Runs the siamese pretraining loop.
///
/// Every step draws a batch, encodes two augmented views per document,
/// combines the ranking loss with the divergence loss (weighted by lambda,
/// forced to 0 in simcse mode), backpropagates, and applies AdamW. The
/// divergence branch is evaluated in both modes so the two modes consume
/// identical randomness and their loss histories are comparable seed for
/// seed. `on_checkpoint` fires every `checkpoint_every` steps.
pub fn pretrain(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    ens_cfg: &EnsembleConfig,
    cfg: &TrainConfig,
    mode: TrainMode,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> std::result::Result<Checkpoint, PretrainError> {
    cfg.validate()?;
    enc_cfg.validate()?;
    ens_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()).into());
    }
    if cfg.batch_size > corpus.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds corpus size {}",
            cfg.batch_size,
            corpus.len()
        ))
        .into());
    }
    if corpus.vocab.len() != enc_cfg.vocab_size {
        return Err(Error::VocabMismatch {
            corpus: corpus.vocab.len(),
            checkpoint: enc_cfg.vocab_size,
        }
        .into());
    }
    if ens_cfg.input_dim != enc_cfg.proj_dim {
        return Err(Error::Config(format!(
            "ensemble input_dim {} must equal proj_dim {}",
            ens_cfg.input_dim, enc_cfg.proj_dim
        ))
        .into());
    }

    let lambda = match mode {
        TrainMode::SimCse => 0.0,
        TrainMode::SimCseBregman => cfg.lambda,
    };
    let settings = TrainSettings {
        temperature: cfg.temperature,
        sigma: cfg.sigma,
        lambda,
    };

    let mut init_rng = substream(derive_seed(cfg.seed, "init"), 0);
    let mut model = Model::init(enc_cfg, ens_cfg, &mut init_rng)?;
    let mut adam_m = Model::zeros(enc_cfg, ens_cfg);
    let mut adam_v = Model::zeros(enc_cfg, ens_cfg);
    let mut noise_rng = substream(derive_seed(cfg.seed, "noise"), 0);
    let adam_cfg = cfg.adam();

    let mut loss_history = Vec::with_capacity(cfg.steps as usize);
    let mut subnet_grad_l2 = vec![0.0; ens_cfg.subnets];
    let mut last_good: Option<Box<Checkpoint>> = None;

    let mut epoch: u64 = 0;
    let mut batches = batch_iter(corpus, cfg.batch_size, derive_seed(cfg.seed, "order0"), true);

    let max_tokens = enc_cfg.max_len - 1;
    for step in 1..=cfg.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = batch_iter(
                    corpus,
                    cfg.batch_size,
                    derive_seed(cfg.seed, &format!("order{epoch}")),
                    true,
                );
                batches.next().expect("non-empty corpus yields batches")
            }
        };

        // Sequences longer than the encoder input are truncated.
        let tokens: Vec<&[u32]> = batch
            .iter()
            .map(|&i| {
                let t = &corpus.documents[i].token_ids;
                &t[..t.len().min(max_tokens)]
            })
            .collect();

        let step_result = (|| -> Result<LossBreakdown> {
            let pair = forward_pair(&tokens, &model.encoder, enc_cfg, &mut noise_rng)?;
            let cos = cosine_sim_matrix(&pair.s_a, &pair.s_b)?;
            let (mnr, d_sim) = mnr_loss(&cos.sim, cfg.temperature);
            let bregman = bregman_loss(&pair.s_a, &pair.s_b, &model.ensemble, cfg.sigma);
            let breakdown = total_loss(mnr, bregman.loss, lambda);
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step,
                });
            }

            let mut grads = Model::zeros(enc_cfg, ens_cfg);
            let (mut d_s_a, mut d_s_b) = cos.backward(&d_sim);
            if lambda != 0.0 {
                d_s_a.scaled_add(lambda, &bregman.d_s_a);
                d_s_b.scaled_add(lambda, &bregman.d_s_b);
                add_scaled_ensemble(&mut grads.ensemble, &bregman.grads, lambda);
            }
            for (i, trace) in pair.traces_a.iter().enumerate() {
                encode_backward(
                    trace,
                    &model.encoder,
                    enc_cfg,
                    &d_s_a.row(i).to_owned(),
                    &mut grads.encoder,
                );
            }
            for (i, trace) in pair.traces_b.iter().enumerate() {
                encode_backward(
                    trace,
                    &model.encoder,
                    enc_cfg,
                    &d_s_b.row(i).to_owned(),
                    &mut grads.encoder,
                );
            }

            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            accumulate_subnet_norms(&grads.ensemble, &mut subnet_grad_l2);
            adamw_step(&mut model, &grads, &mut adam_m, &mut adam_v, step, &adam_cfg)?;
            model.ensemble.update_running_stats(&bregman.trace, 0.9);
            Ok(breakdown)
        })();

        let breakdown = match step_result {
            Ok(b) => b,
            Err(error) => {
                return Err(PretrainError {
                    error,
                    last_good: last_good.take(),
                })
            }
        };
        loss_history.push(LossRecord {
            step,
            mnr: breakdown.mnr,
            bregman: breakdown.bregman,
            total: breakdown.total,
        });

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_VERSION,
                step,
                encoder_config: *enc_cfg,
                ensemble_config: *ens_cfg,
                train_settings: settings,
                model: model.clone(),
                adam_m: adam_m.clone(),
                adam_v: adam_v.clone(),
                rng_state: RngState::capture(&noise_rng),
                loss_history: loss_history.clone(),
                subnet_grad_l2: subnet_grad_l2.clone(),
            };
            if step % cfg.checkpoint_every == 0 {
                on_checkpoint(&ckpt)?;
            }
            if step == cfg.steps {
                return Ok(ckpt);
            }
            last_good = Some(Box::new(ckpt));
        }
    }
    unreachable!("loop returns at the final step");
}

fn add_scaled_ensemble(dst: &mut SubnetEnsemble, src: &SubnetEnsemble, scale: f64) {
    let mut dst_tensors = dst.trainable_mut();
    let src_tensors = src.trainable();
    for (d, s) in dst_tensors.iter_mut().zip(src_tensors.iter()) {
        for (dv, &sv) in d.1.iter_mut().zip(s.1.iter()) {
            *dv += scale * sv;
        }
    }
}

fn clip_gradients(grads: &mut Model, max_norm: f64) {
    let mut norm_sq = 0.0;
    for (_, t) in grads.trainable() {
        for &v in t.iter() {
            norm_sq += v * v;
        }
    }
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, mut t) in grads.trainable_mut() {
            for v in t.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Adds this step's per-subnetwork gradient L2 norm to the running totals.
fn accumulate_subnet_norms(grads: &SubnetEnsemble, totals: &mut [f64]) {
    match &grads.params {
        EnsembleParams::Affine { weights, biases } => {
            for k in 0..totals.len() {
                let mut sq = biases[k] * biases[k];
                for &w in weights.row(k).iter() {
                    sq += w * w;
                }
                totals[k] += sq.sqrt();
            }
        }
        EnsembleParams::Mlp(nets) => {
            for (k, net) in nets.iter().enumerate() {
                let mut sq = 0.0;
                for &v in net
                    .w1
                    .iter()
                    .chain(net.b1.iter())
                    .chain(net.bn1.gamma.iter())
                    .chain(net.bn1.beta.iter())
                    .chain(net.bn2.gamma.iter())
                    .chain(net.bn2.beta.iter())
                    .chain(net.w2.iter())
                    .chain(net.b2.iter())
                {
                    sq += v * v;
                }
                totals[k] += sq.sqrt();
            }
        }
    }
}

/// Renders a loss history as `step,mnr,bregman,total` CSV.
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,mnr,bregman,total\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.mnr, r.bregman, r.total));
    }
    out
}

#[cfg(test)]
mod tests;
