//! Frozen-embedding evaluation: extraction, probes, F1 metrics, few-shot
//! harness, and collapse diagnostics.

mod collapse;
mod fewshot;
mod metrics;
mod probe;

pub use collapse::{collapse_metrics, CollapseMetrics};
pub use fewshot::{fewshot_eval, FewshotReport};
pub use metrics::{f1_scores, F1Scores};
pub use probe::{train_probe, ProbeConfig, ProbeHead, ProbeReport};

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TaskKind};
use crate::encoder::{encode, Mode, Pooling};
use crate::error::{Error, Result};
use crate::tensors::{decode_f64_b64, encode_f64_b64};
use crate::training::Checkpoint;

/// Frozen document embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub doc_ids: Vec<String>,
    pub labels: Vec<Vec<u32>>,
    pub task_kind: TaskKind,
    pub num_labels: usize,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Encodes every document of `corpus` in eval mode with the checkpoint's
/// encoder.
///
/// `pooling_override` swaps the pooling operator at extraction time;
/// `max_len_override` truncates inputs to a shorter limit. The checkpoint
/// is read-only throughout.
pub fn extract_embeddings(
    corpus: &Corpus,
    checkpoint: &Checkpoint,
    pooling_override: Option<Pooling>,
    max_len_override: Option<usize>,
) -> Result<EmbeddingMatrix> {
    if corpus.vocab.len() != checkpoint.encoder_config.vocab_size {
        return Err(Error::VocabMismatch {
            corpus: corpus.vocab.len(),
            checkpoint: checkpoint.encoder_config.vocab_size,
        });
    }
    let mut config = checkpoint.encoder_config;
    if let Some(p) = pooling_override {
        config.pooling = p;
    }
    let max_len = max_len_override
        .unwrap_or(config.max_len)
        .min(config.max_len);
    let max_tokens = max_len - 1;

    let mut rows = Array2::zeros((corpus.len(), config.proj_dim));
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (i, doc) in corpus.documents.iter().enumerate() {
        let tokens = &doc.token_ids[..doc.token_ids.len().min(max_tokens)];
        let (s, _) = encode(tokens, &checkpoint.model.encoder, &config, Mode::Eval, None)?;
        rows.row_mut(i).assign(&s);
        doc_ids.push(doc.id.clone());
        labels.push(doc.labels.clone());
    }
    Ok(EmbeddingMatrix {
        rows,
        doc_ids,
        labels,
        task_kind: corpus.task_kind,
        num_labels: corpus.num_labels,
    })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    dim: usize,
    num_labels: usize,
    task_kind: TaskKind,
    doc_ids: Vec<String>,
    labels: Vec<Vec<u32>>,
    data: String,
}

impl EmbeddingMatrix {
    /// Persists as JSON with a base64 little-endian f64 row-major payload.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = EmbeddingFile {
            dim: self.dim(),
            num_labels: self.num_labels,
            task_kind: self.task_kind,
            doc_ids: self.doc_ids.clone(),
            labels: self.labels.clone(),
            data: encode_f64_b64(&self.rows.iter().copied().collect::<Vec<_>>()),
        };
        let json = serde_json::to_string(&file).expect("embedding serialization cannot fail");
        crate::fsutil::write_atomic(path, json.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("embedding file: {e}"),
        })?;
        let n = file.doc_ids.len();
        if file.labels.len() != n {
            return Err(Error::Validation(
                "embedding file: labels and doc_ids lengths differ".into(),
            ));
        }
        let data = decode_f64_b64(&file.data, n * file.dim, "data")?;
        let rows = Array2::from_shape_vec((n, file.dim), data)
            .expect("length checked by decode_f64_b64");
        Ok(EmbeddingMatrix {
            rows,
            doc_ids: file.doc_ids,
            labels: file.labels,
            task_kind: file.task_kind,
            num_labels: file.num_labels,
        })
    }
}
