//! Checkpoint persistence: a JSON header plus base64 little-endian f64
//! payloads per named tensor, bit-exact across save/load.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::EnsembleConfig;
use crate::tensors::{decode_f64_b64, encode_f64_b64, NamedTensors};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Scalar hyperparameters recorded alongside the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub temperature: f64,
    pub sigma: f64,
    pub lambda: f64,
}

/// Serializable ChaCha8 state: seed bytes, stream id, and word position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_b64: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_b64: encode_seed(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed = decode_seed(&self.seed_b64)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("field rng_state.word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn encode_seed(seed: &[u8; 32]) -> String {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    STANDARD.encode(seed)
}

fn decode_seed(text: &str) -> Result<[u8; 32]> {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("field rng_state.seed_b64: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("field rng_state.seed_b64: expected 32 bytes".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub mnr: f64,
    pub bregman: f64,
    pub total: f64,
}

/// Full training state: model, optimizer moments, RNG position, history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub encoder_config: EncoderConfig,
    pub ensemble_config: EnsembleConfig,
    pub train_settings: TrainSettings,
    pub model: Model,
    pub adam_m: Model,
    pub adam_v: Model,
    pub rng_state: RngState,
    pub loss_history: Vec<LossRecord>,
    /// Cumulative gradient L2 norm per subnetwork (training diagnostic).
    pub subnet_grad_l2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    step: u64,
    encoder_config: EncoderConfig,
    ensemble_config: EnsembleConfig,
    train_settings: TrainSettings,
    rng_state: RngState,
    loss_history: Vec<(u64, f64, f64, f64)>,
    subnet_grad_l2: Vec<f64>,
    tensors: Vec<TensorRecord>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut push_all = |prefix: &str, named: Vec<(String, crate::tensors::TensorRef<'_>)>| {
        for (name, t) in named {
            tensors.push(TensorRecord {
                name: format!("{prefix}{name}"),
                shape: t.shape(),
                data: encode_f64_b64(&t.to_vec()),
            });
        }
    };
    push_all("", ckpt.model.all());
    push_all("adam_m.", ckpt.adam_m.trainable());
    push_all("adam_v.", ckpt.adam_v.trainable());

    let file = CheckpointFile {
        format_version: ckpt.format_version,
        step: ckpt.step,
        encoder_config: ckpt.encoder_config,
        ensemble_config: ckpt.ensemble_config,
        train_settings: ckpt.train_settings,
        rng_state: ckpt.rng_state.clone(),
        loss_history: ckpt
            .loss_history
            .iter()
            .map(|r| (r.step, r.mnr, r.bregman, r.total))
            .collect(),
        subnet_grad_l2: ckpt.subnet_grad_l2.clone(),
        tensors,
    };
    let json = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    crate::fsutil::write_atomic(path, json.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing field format_version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    file.encoder_config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Checkpoint(format!("field encoder_config: {msg}")),
        other => other,
    })?;
    file.ensemble_config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Checkpoint(format!("field ensemble_config: {msg}")),
        other => other,
    })?;

    let mut records: HashMap<String, TensorRecord> = HashMap::with_capacity(file.tensors.len());
    for rec in file.tensors {
        if records.insert(rec.name.clone(), rec).is_some() {
            return Err(Error::Checkpoint("duplicate tensor record".into()));
        }
    }

    let mut model = Model::zeros(&file.encoder_config, &file.ensemble_config);
    let mut adam_m = Model::zeros(&file.encoder_config, &file.ensemble_config);
    let mut adam_v = Model::zeros(&file.encoder_config, &file.ensemble_config);

    let mut fill = |prefix: &str,
                    named: Vec<(String, crate::tensors::TensorMut<'_>)>|
     -> Result<()> {
        for (name, mut t) in named {
            let full = format!("{prefix}{name}");
            let rec = records
                .remove(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            let expected_shape: Vec<usize> = match &t {
                crate::tensors::TensorMut::V(a) => a.shape().to_vec(),
                crate::tensors::TensorMut::M(a) => a.shape().to_vec(),
            };
            if rec.shape != expected_shape {
                return Err(Error::Checkpoint(format!(
                    "field {full}: shape {:?} does not match expected {:?}",
                    rec.shape, expected_shape
                )));
            }
            let data = decode_f64_b64(&rec.data, t.len(), &full)?;
            t.fill_from(&data);
        }
        Ok(())
    };
    fill("", model.all_mut())?;
    fill("adam_m.", adam_m.trainable_mut())?;
    fill("adam_v.", adam_v.trainable_mut())?;
    if let Some(stray) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {stray}")));
    }

    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        step: file.step,
        encoder_config: file.encoder_config,
        ensemble_config: file.ensemble_config,
        train_settings: file.train_settings,
        model,
        adam_m,
        adam_v,
        rng_state: file.rng_state,
        loss_history: file
            .loss_history
            .into_iter()
            .map(|(step, mnr, bregman, total)| LossRecord {
                step,
                mnr,
                bregman,
                total,
            })
            .collect(),
        subnet_grad_l2: file.subnet_grad_l2,
    })
}
