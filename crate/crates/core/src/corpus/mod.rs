//! Corpora of tokenized long documents: synthetic generation, JSONL
//! ingestion, label-stratified splits, and deterministic batching.

mod generate;
mod jsonl;

pub use generate::{generate_corpus, GenSpec};
pub use jsonl::{load_jsonl, load_jsonl_with, LoadOptions};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";
pub const MASK_TOKEN: &str = "<mask>";

/// Token vocabulary with contiguous ids starting at 0.
///
/// Ids 0..3 are reserved: PAD=0, CLS=1, MASK=2.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::with_specials()
    }
}

impl Vocab {
    /// Vocabulary holding only the three special tokens.
    pub fn with_specials() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN, CLS_TOKEN, MASK_TOKEN] {
            v.add(t);
        }
        v
    }

    /// Vocabulary of `size` entries: specials plus synthesized tokens
    /// `w3..w{size-1}`, used for generated corpora.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Self::with_specials();
        for i in 3..size {
            v.add(&format!("w{i}"));
        }
        v
    }

    /// Adds a token, returning its id; existing tokens keep their id.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Persists the vocabulary as a JSON `{token: id}` map.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        // serde_json maps over &str keys are emitted in insertion order of
        // a Vec of pairs; build explicitly by id for a stable file.
        let pairs: Vec<(String, u32)> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut obj = serde_json::Map::new();
        for (t, i) in pairs {
            obj.insert(t, serde_json::Value::from(i));
        }
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))
            .expect("vocab serialization cannot fail");
        crate::fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, u32> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("vocab json: {e}"),
        })?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, id) in &map {
            let slot = tokens
                .get_mut(*id as usize)
                .ok_or_else(|| Error::Validation(format!("vocab id {id} not contiguous")))?;
            if !slot.is_empty() {
                return Err(Error::Validation(format!("duplicate vocab id {id}")));
            }
            *slot = t.clone();
        }
        if tokens.len() < 3
            || tokens[PAD_ID as usize] != PAD_TOKEN
            || tokens[CLS_ID as usize] != CLS_TOKEN
            || tokens[MASK_ID as usize] != MASK_TOKEN
        {
            return Err(Error::Validation(
                "vocab missing reserved specials <pad>=0, <cls>=1, <mask>=2".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::SingleLabel => write!(f, "single_label"),
            TaskKind::MultiLabel => write!(f, "multi_label"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_label" => Ok(TaskKind::SingleLabel),
            "multi_label" => Ok(TaskKind::MultiLabel),
            other => Err(Error::Config(format!(
                "unknown task kind {other:?} (expected single_label or multi_label)"
            ))),
        }
    }
}

/// One tokenized document with its label set (sorted, deduplicated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub labels: Vec<u32>,
}

/// A labeled document collection sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub num_labels: usize,
    pub task_kind: TaskKind,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Checks the corpus invariants: non-empty documents, valid token ids,
    /// label indices below `num_labels`, label cardinality matching the task.
    pub fn validate(&self) -> Result<()> {
        let vocab_len = self.vocab.len() as u32;
        for doc in &self.documents {
            if doc.token_ids.is_empty() {
                return Err(Error::Validation(format!("document {} is empty", doc.id)));
            }
            if let Some(&bad) = doc.token_ids.iter().find(|&&t| t >= vocab_len) {
                return Err(Error::Validation(format!(
                    "document {}: token id {bad} outside vocabulary of {vocab_len}",
                    doc.id
                )));
            }
            if let Some(&bad) = doc.labels.iter().find(|&&l| l as usize >= self.num_labels) {
                return Err(Error::Validation(format!(
                    "document {}: label {bad} outside 0..{}",
                    doc.id, self.num_labels
                )));
            }
            match self.task_kind {
                TaskKind::SingleLabel if doc.labels.len() != 1 => {
                    return Err(Error::Validation(format!(
                        "document {}: single-label corpus requires exactly 1 label, got {}",
                        doc.id,
                        doc.labels.len()
                    )));
                }
                TaskKind::MultiLabel if doc.labels.is_empty() => {
                    return Err(Error::Validation(format!(
                        "document {}: multi-label corpus requires at least 1 label",
                        doc.id
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Writes one `{"id", "token_ids", "labels"}` record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str(&serde_json::to_string(doc).expect("document serialization cannot fail"));
            out.push('\n');
        }
        crate::fsutil::write_atomic(path, out.as_bytes())
    }
}

/// Splits a corpus into disjoint, exhaustive train/dev/test parts.
///
/// Stratification is best-effort by each document's first label; rounding
/// leftovers are rebalanced so the three sizes match the largest-remainder
/// allocation of `ratios` exactly.
pub fn split(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x <= 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1 (got {sum})"
        )));
    }
    let n = corpus.len();
    let targets = largest_remainder(n, &r);
    if targets.iter().any(|&t| t == 0) {
        return Err(Error::Config(format!(
            "split of {n} documents with ratios {ratios:?} leaves an empty part"
        )));
    }

    // Group by first label, shuffle within groups, allocate per group.
    let mut groups: Vec<(u32, Vec<usize>)> = {
        let mut by_label: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, doc) in corpus.documents.iter().enumerate() {
            let key = doc.labels.first().copied().unwrap_or(0);
            by_label.entry(key).or_default().push(i);
        }
        by_label.into_iter().collect()
    };
    groups.sort_by_key(|(label, _)| *label);

    let mut rng = seeded(seed);
    let mut assigned: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (_, members) in groups.iter_mut() {
        shuffle(members, &mut rng);
        let counts = largest_remainder(members.len(), &r);
        let mut cursor = 0;
        for (part, &c) in counts.iter().enumerate() {
            assigned[part].extend_from_slice(&members[cursor..cursor + c]);
            cursor += c;
        }
    }

    // Per-group rounding can drift from the global targets; move the most
    // recently assigned documents of over-full parts into under-full ones.
    loop {
        let over = (0..3).find(|&i| assigned[i].len() > targets[i]);
        let under = (0..3).find(|&i| assigned[i].len() < targets[i]);
        match (over, under) {
            (Some(o), Some(u)) => {
                let doc = assigned[o].pop().expect("over-full part is non-empty");
                assigned[u].push(doc);
            }
            _ => break,
        }
    }

    let take = |indices: &[usize]| -> Corpus {
        let mut sorted: Vec<usize> = indices.to_vec();
        sorted.sort_unstable();
        Corpus {
            documents: sorted.iter().map(|&i| corpus.documents[i].clone()).collect(),
            num_labels: corpus.num_labels,
            task_kind: corpus.task_kind,
            vocab: corpus.vocab.clone(),
        }
    };
    Ok((take(&assigned[0]), take(&assigned[1]), take(&assigned[2])))
}

/// Integer allocation of `n` items proportional to `ratios`.
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Iterator over batches of document indices.
///
/// The last partial batch is yielded; with `shuffle` the order is a
/// seed-deterministic permutation, otherwise corpus order.
pub fn batch_iter(corpus: &Corpus, batch_size: usize, seed: u64, shuffle_docs: bool) -> BatchIter {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if shuffle_docs {
        let mut rng = seeded(seed);
        shuffle(&mut order, &mut rng);
    }
    BatchIter {
        order,
        batch_size,
        cursor: 0,
    }
}

pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests;
