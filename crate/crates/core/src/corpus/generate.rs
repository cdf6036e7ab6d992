//! Synthetic topic-model corpus generator.
//!
//! Each document mixes a shared background vocabulary with Zipfian draws
//! from the vocabulary slices of its topics. Lengths are lognormal with a
//! long tail, clamped to [64, 8192] tokens.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Zipf};

use super::{Corpus, Document, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const MIN_DOC_LEN: usize = 64;
pub const MAX_DOC_LEN: usize = 8192;

/// Fraction of tokens drawn from the shared background slice rather than a
/// topic slice. Keeps bag-of-token statistics noisy enough that untrained
/// projections of them leave headroom for contrastive pretraining.
const BACKGROUND_RATE: f64 = 0.82;

/// Fraction of the non-special vocabulary reserved for background tokens.
const BACKGROUND_VOCAB_SHARE: f64 = 0.5;

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub num_topics: usize,
    pub vocab_size: usize,
    pub docs: usize,
    /// Mean document length in tokens (of the lognormal, before clamping).
    pub mean_length: f64,
    /// Standard deviation of document length in tokens.
    pub sd_length: f64,
    /// Inclusive range of topics per document.
    pub topics_per_doc: (usize, usize),
    pub zipf_exponent: f64,
    pub seed: u64,
    pub task_kind: TaskKind,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_topics: 8,
            vocab_size: 2048,
            docs: 1000,
            mean_length: 512.0,
            sd_length: 256.0,
            topics_per_doc: (1, 2),
            zipf_exponent: 1.05,
            seed: 7,
            task_kind: TaskKind::SingleLabel,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config(format!(
                "num_topics must be >= 2, got {}",
                self.num_topics
            )));
        }
        if self.vocab_size <= self.num_topics * 10 {
            return Err(Error::Config(format!(
                "vocab_size must exceed num_topics * 10 = {}, got {}",
                self.num_topics * 10,
                self.vocab_size
            )));
        }
        if self.docs == 0 {
            return Err(Error::Config("docs must be >= 1".into()));
        }
        if self.mean_length < MIN_DOC_LEN as f64 {
            return Err(Error::Config(format!(
                "mean_length must be >= {MIN_DOC_LEN}, got {}",
                self.mean_length
            )));
        }
        if !(self.sd_length > 0.0) {
            return Err(Error::Config(format!(
                "sd_length must be positive, got {}",
                self.sd_length
            )));
        }
        let (lo, hi) = self.topics_per_doc;
        if lo < 1 || lo > hi || hi > self.num_topics {
            return Err(Error::Config(format!(
                "topics_per_doc range {lo}..{hi} invalid for {} topics",
                self.num_topics
            )));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Config(format!(
                "zipf_exponent must be positive, got {}",
                self.zipf_exponent
            )));
        }
        Ok(())
    }
}

/// Underlying normal parameters for a lognormal with the given mean and sd.
fn lognormal_params(mean: f64, sd: f64) -> (f64, f64) {
    let cv2 = (sd / mean).powi(2);
    let sigma2 = (1.0 + cv2).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    (mu, sigma2.sqrt())
}

struct SliceLayout {
    background_start: u32,
    background_len: usize,
    topic_len: usize,
    topics_start: u32,
}

impl SliceLayout {
    fn new(vocab_size: usize, num_topics: usize) -> Self {
        let usable = vocab_size - 3;
        let background_len = ((usable as f64) * BACKGROUND_VOCAB_SHARE) as usize;
        let topic_len = (usable - background_len) / num_topics;
        SliceLayout {
            background_start: 3,
            background_len,
            topic_len,
            topics_start: 3 + background_len as u32,
        }
    }

    fn topic_slice_start(&self, topic: usize) -> u32 {
        self.topics_start + (topic * self.topic_len) as u32
    }
}

/// Generates a corpus deterministically from `spec`.
///
/// Document `i` is produced from stream `i + 1` of the seed, so output is
/// independent of generation order.
pub fn generate_corpus(spec: &GenSpec) -> Result<Corpus> {
    spec.validate()?;
    let layout = SliceLayout::new(spec.vocab_size, spec.num_topics);
    let (mu, sigma) = lognormal_params(spec.mean_length, spec.sd_length);
    let length_dist = LogNormal::new(mu, sigma).expect("validated lognormal parameters");
    let background_zipf = Zipf::new(layout.background_len as f64, spec.zipf_exponent)
        .expect("validated zipf parameters");
    let topic_zipf =
        Zipf::new(layout.topic_len as f64, spec.zipf_exponent).expect("validated zipf parameters");

    let mut documents = Vec::with_capacity(spec.docs);
    for i in 0..spec.docs {
        let mut rng = substream(spec.seed, (i + 1) as u64);
        let len = (length_dist.sample(&mut rng).round() as usize).clamp(MIN_DOC_LEN, MAX_DOC_LEN);

        let k = rng.random_range(spec.topics_per_doc.0..=spec.topics_per_doc.1);
        let topics = sample_distinct(spec.num_topics, k, &mut rng);
        let mut counts = vec![0usize; topics.len()];

        let mut token_ids = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random_bool(BACKGROUND_RATE) {
                let rank = background_zipf.sample(&mut rng) as u32 - 1;
                token_ids.push(layout.background_start + rank);
            } else {
                let which = rng.random_range(0..topics.len());
                counts[which] += 1;
                let rank = topic_zipf.sample(&mut rng) as u32 - 1;
                token_ids.push(layout.topic_slice_start(topics[which]) + rank);
            }
        }

        let labels: Vec<u32> = match spec.task_kind {
            TaskKind::MultiLabel => {
                let mut ls: Vec<u32> = topics.iter().map(|&t| t as u32).collect();
                ls.sort_unstable();
                ls
            }
            TaskKind::SingleLabel => {
                // Dominant topic; ties break toward the smallest topic index.
                let mut best = 0usize;
                for j in 1..topics.len() {
                    if counts[j] > counts[best]
                        || (counts[j] == counts[best] && topics[j] < topics[best])
                    {
                        best = j;
                    }
                }
                vec![topics[best] as u32]
            }
        };

        documents.push(Document {
            id: format!("doc{i:05}"),
            token_ids,
            labels,
        });
    }

    let corpus = Corpus {
        documents,
        num_labels: spec.num_topics,
        task_kind: spec.task_kind,
        vocab: Vocab::synthetic(spec.vocab_size),
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Samples `k` distinct values from `0..n` (partial Fisher-Yates).
fn sample_distinct(n: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
