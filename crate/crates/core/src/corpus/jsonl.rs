//! Newline-delimited JSON corpus ingestion.

use std::path::Path;

use serde::Deserialize;

use super::{Corpus, Document, TaskKind, Vocab};
use crate::error::{Error, Result};

/// Optional context for loading: a vocabulary to validate/extend, and
/// overrides for the task kind and label count (both inferred otherwise).
#[derive(Debug, Default, Clone)]
pub struct LoadOptions {
    pub vocab: Option<Vocab>,
    pub task_kind: Option<TaskKind>,
    pub num_labels: Option<usize>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    token_ids: Option<Vec<u32>>,
    labels: Option<Vec<u32>>,
    // unknown fields are ignored by serde's default behavior
}

/// Loads a corpus from `{"id", "text" | "token_ids", "labels"}` records,
/// inferring vocabulary, task kind, and label count from the data.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    load_jsonl_with(path, &LoadOptions::default())
}

/// Loads a corpus with an explicit vocabulary and/or task metadata.
///
/// Records with `text` are whitespace-tokenized into the vocabulary
/// (extending it); records with `token_ids` are validated against it.
pub fn load_jsonl_with(path: &Path, opts: &LoadOptions) -> Result<Corpus> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut vocab = opts.vocab.clone();
    let mut documents = Vec::new();
    let mut max_token_id: u32 = 0;
    let mut saw_raw_ids = false;

    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_num,
            msg: e.to_string(),
        })?;
        let id = raw.id.ok_or_else(|| Error::Parse {
            line: line_num,
            msg: "missing \"id\" field".into(),
        })?;
        let mut labels = raw.labels.ok_or_else(|| Error::Parse {
            line: line_num,
            msg: "missing \"labels\" field".into(),
        })?;
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() {
            return Err(Error::Validation(format!(
                "line {line_num}: document {id} has no labels"
            )));
        }

        let token_ids = match (raw.token_ids, raw.text) {
            (Some(ids), _) => {
                saw_raw_ids = true;
                if let Some(v) = &vocab {
                    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v.len()) {
                        return Err(Error::Validation(format!(
                            "line {line_num}: token id {bad} outside vocabulary of {}",
                            v.len()
                        )));
                    }
                }
                max_token_id = max_token_id.max(ids.iter().copied().max().unwrap_or(0));
                ids
            }
            (None, Some(text)) => {
                let v = vocab.get_or_insert_with(Vocab::with_specials);
                text.split_whitespace().map(|t| v.add(t)).collect()
            }
            (None, None) => {
                return Err(Error::Parse {
                    line: line_num,
                    msg: "record needs either \"text\" or \"token_ids\"".into(),
                });
            }
        };
        if token_ids.is_empty() {
            return Err(Error::Validation(format!(
                "line {line_num}: document {id} is empty"
            )));
        }

        documents.push(Document {
            id,
            token_ids,
            labels,
        });
    }

    // Raw ids without a provided vocabulary: synthesize one covering them.
    let vocab = match vocab {
        Some(v) => {
            if saw_raw_ids && (max_token_id as usize) >= v.len() {
                return Err(Error::Validation(format!(
                    "token id {max_token_id} outside vocabulary of {}",
                    v.len()
                )));
            }
            v
        }
        None => Vocab::synthetic((max_token_id as usize + 1).max(3)),
    };

    let task_kind = opts.task_kind.unwrap_or_else(|| {
        if documents.iter().any(|d| d.labels.len() > 1) {
            TaskKind::MultiLabel
        } else {
            TaskKind::SingleLabel
        }
    });
    let num_labels = opts.num_labels.unwrap_or_else(|| {
        documents
            .iter()
            .flat_map(|d| d.labels.iter())
            .max()
            .map(|&m| m as usize + 1)
            .unwrap_or(0)
    });

    let corpus = Corpus {
        documents,
        num_labels,
        task_kind,
        vocab,
    };
    corpus.validate()?;
    Ok(corpus)
}
