use std::collections::BTreeSet;

use super::*;
use crate::error::Error;

fn small_spec() -> GenSpec {
    GenSpec {
        num_topics: 4,
        vocab_size: 256,
        docs: 50,
        mean_length: 64.0,
        sd_length: 16.0,
        topics_per_doc: (1, 2),
        zipf_exponent: 1.1,
        seed: 7,
        task_kind: TaskKind::MultiLabel,
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec();
    let a = generate_corpus(&spec).unwrap();
    let b = generate_corpus(&spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generated_mean_length_tracks_spec() {
    // Sample-mean oracle: the empirical mean over the generated corpus
    // must sit within +/-20% of the requested mean.
    let spec = GenSpec {
        num_topics: 8,
        vocab_size: 1024,
        docs: 1000,
        mean_length: 512.0,
        sd_length: 256.0,
        seed: 13,
        ..small_spec()
    };
    let corpus = generate_corpus(&spec).unwrap();
    assert_eq!(corpus.len(), 1000);
    assert_eq!(corpus.num_labels, 8);
    let mean =
        corpus.documents.iter().map(|d| d.token_ids.len()).sum::<usize>() as f64 / 1000.0;
    assert!(
        (mean - 512.0).abs() <= 0.2 * 512.0,
        "empirical mean length {mean} outside 512 +/- 20%"
    );
}

#[test]
fn single_topic_range_forces_single_label() {
    let spec = GenSpec {
        topics_per_doc: (1, 1),
        task_kind: TaskKind::SingleLabel,
        ..small_spec()
    };
    let corpus = generate_corpus(&spec).unwrap();
    assert!(corpus.documents.iter().all(|d| d.labels.len() == 1));
}

#[test]
fn generated_lengths_respect_clamp() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    assert!(corpus
        .documents
        .iter()
        .all(|d| (64..=8192).contains(&d.token_ids.len())));
}

#[test]
fn invalid_specs_name_the_violated_bound() {
    let tiny_vocab = GenSpec {
        vocab_size: 40,
        ..small_spec()
    };
    match generate_corpus(&tiny_vocab) {
        Err(Error::Config(msg)) => assert!(msg.contains("vocab_size"), "got: {msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let short_docs = GenSpec {
        mean_length: 32.0,
        ..small_spec()
    };
    match generate_corpus(&short_docs) {
        Err(Error::Config(msg)) => assert!(msg.contains("mean_length"), "got: {msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn jsonl_round_trip_preserves_corpus() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("corpus.jsonl");
    let vocab = dir.path().join("vocab.json");
    corpus.save_jsonl(&jsonl).unwrap();
    corpus.vocab.save_json(&vocab).unwrap();

    let loaded = load_jsonl_with(
        &jsonl,
        &LoadOptions {
            vocab: Some(Vocab::load_json(&vocab).unwrap()),
            task_kind: Some(corpus.task_kind),
            num_labels: Some(corpus.num_labels),
        },
    )
    .unwrap();
    assert_eq!(corpus, loaded);
}

#[test]
fn load_jsonl_reads_text_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("text.jsonl");
    std::fs::write(
        &path,
        concat!(
            "{\"id\": \"a\", \"text\": \"the cat sat\", \"labels\": [0]}\n",
            "{\"id\": \"b\", \"text\": \"the dog ran\", \"labels\": [1], \"extra\": 1}\n",
            "{\"id\": \"c\", \"text\": \"cat dog\", \"labels\": [0, 1]}\n",
        ),
    )
    .unwrap();
    let corpus = load_jsonl(&path).unwrap();
    assert_eq!(corpus.len(), 3);
    assert_eq!(corpus.task_kind, TaskKind::MultiLabel);
    assert_eq!(corpus.num_labels, 2);
    // "the" appears in two documents and must map to one id
    assert_eq!(corpus.documents[0].token_ids[0], corpus.documents[1].token_ids[0]);
}

#[test]
fn load_jsonl_rejects_empty_labels_and_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let empty_labels = dir.path().join("empty.jsonl");
    std::fs::write(&empty_labels, "{\"id\": \"a\", \"text\": \"x\", \"labels\": []}\n").unwrap();
    assert!(matches!(
        load_jsonl(&empty_labels),
        Err(Error::Validation(_))
    ));

    let malformed = dir.path().join("bad.jsonl");
    std::fs::write(
        &malformed,
        "{\"id\": \"a\", \"text\": \"x\", \"labels\": [0]}\nnot json\n",
    )
    .unwrap();
    match load_jsonl(&malformed) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error with line number, got {other:?}"),
    }
}

#[test]
fn split_sizes_follow_ratios_exactly() {
    let spec = GenSpec {
        docs: 1000,
        num_topics: 8,
        vocab_size: 1024,
        ..small_spec()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let (train, dev, test) = split(&corpus, (0.8, 0.1, 0.1), 11).unwrap();
    assert_eq!(train.len(), 800);
    assert_eq!(dev.len(), 100);
    assert_eq!(test.len(), 100);
}

#[test]
fn split_is_deterministic_and_exhaustive() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    let (a1, b1, c1) = split(&corpus, (0.6, 0.2, 0.2), 3).unwrap();
    let (a2, b2, c2) = split(&corpus, (0.6, 0.2, 0.2), 3).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(c1, c2);

    // Set-equality oracle: the union of split ids is the original id set.
    let ids = |c: &Corpus| -> BTreeSet<String> {
        c.documents.iter().map(|d| d.id.clone()).collect()
    };
    let mut union = ids(&a1);
    union.extend(ids(&b1));
    union.extend(ids(&c1));
    assert_eq!(union, ids(&corpus));
    assert_eq!(a1.len() + b1.len() + c1.len(), corpus.len());
}

#[test]
fn split_rejects_empty_parts_and_bad_ratios() {
    let spec = GenSpec {
        docs: 5,
        ..small_spec()
    };
    let corpus = generate_corpus(&spec).unwrap();
    assert!(matches!(
        split(&corpus, (0.98, 0.01, 0.01), 1),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        split(&corpus, (0.5, 0.2, 0.2), 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn batches_cover_corpus_with_partial_tail() {
    let spec = GenSpec {
        docs: 10,
        ..small_spec()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let sizes: Vec<usize> = batch_iter(&corpus, 4, 0, false).map(|b| b.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);

    let in_order: Vec<usize> = batch_iter(&corpus, 4, 0, false).flatten().collect();
    assert_eq!(in_order, (0..10).collect::<Vec<_>>());

    let shuffled1: Vec<usize> = batch_iter(&corpus, 4, 9, true).flatten().collect();
    let shuffled2: Vec<usize> = batch_iter(&corpus, 4, 9, true).flatten().collect();
    assert_eq!(shuffled1, shuffled2);
    let mut sorted = shuffled1.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
}

#[test]
fn vocab_reserves_specials() {
    let v = Vocab::with_specials();
    assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
    assert_eq!(v.id(CLS_TOKEN), Some(CLS_ID));
    assert_eq!(v.id(MASK_TOKEN), Some(MASK_ID));
    assert_eq!(v.len(), 3);
}
