use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use rand::Rng;

use super::*;
use crate::corpus::{generate_corpus, GenSpec, TaskKind};
use crate::encoder::{encode, EncoderConfig, Mode, Pooling};
use crate::objectives::EnsembleConfig;
use crate::rng::seeded;
use crate::tensors::{flatten_trainable, unflatten_trainable, NamedTensors, TensorMut, TensorRef};

// ---------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------

/// Single-tensor parameter holder for optimizer tests.
struct Scalars(Array1<f64>);

impl NamedTensors for Scalars {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)> {
        vec![("theta".to_string(), TensorRef::V(&self.0))]
    }
    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        vec![("theta".to_string(), TensorMut::V(&mut self.0))]
    }
}

/// Plain-f64 reference: one AdamW trajectory for a single coordinate.
fn reference_adamw(theta0: f64, grads: &[f64], cfg: &AdamConfig) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta);
    }
    theta
}

#[test]
fn zero_gradient_without_decay_leaves_parameters_unchanged() {
    let mut params = Scalars(Array1::from_vec(vec![1.0, -2.5, 0.33]));
    let grads = Scalars(Array1::zeros(3));
    let mut m = Scalars(Array1::zeros(3));
    let mut v = Scalars(Array1::zeros(3));
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    adamw_step(&mut params, &grads, &mut m, &mut v, 1, &cfg).unwrap();
    assert_eq!(params.0, Array1::from_vec(vec![1.0, -2.5, 0.33]));
}

#[test]
fn first_step_moves_by_about_the_learning_rate() {
    // Bias-corrected m_hat/sqrt(v_hat) is exactly 1 at t=1 for unit
    // gradient, so the step is lr/(1 + eps) up to eps.
    let mut params = Scalars(Array1::from_vec(vec![0.0]));
    let grads = Scalars(Array1::from_vec(vec![1.0]));
    let mut m = Scalars(Array1::zeros(1));
    let mut v = Scalars(Array1::zeros(1));
    let cfg = AdamConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    adamw_step(&mut params, &grads, &mut m, &mut v, 1, &cfg).unwrap();
    assert_abs_diff_eq!(params.0[0], -1e-3, epsilon = 1e-9);
}

#[test]
fn matches_scalar_reference_over_100_steps() {
    let cfg = AdamConfig {
        lr: 0.01,
        weight_decay: 0.004,
        ..AdamConfig::default()
    };
    let mut rng = seeded(7);
    let grad_seq: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();

    let mut params = Scalars(Array1::from_vec(vec![0.8]));
    let mut m = Scalars(Array1::zeros(1));
    let mut v = Scalars(Array1::zeros(1));
    for (i, &g) in grad_seq.iter().enumerate() {
        let grads = Scalars(Array1::from_vec(vec![g]));
        adamw_step(&mut params, &grads, &mut m, &mut v, (i + 1) as u64, &cfg).unwrap();
    }
    let expected = reference_adamw(0.8, &grad_seq, &cfg);
    assert_abs_diff_eq!(params.0[0], expected, epsilon = 1e-12);
}

#[test]
fn non_finite_gradient_aborts_naming_the_tensor() {
    let mut params = Scalars(Array1::from_vec(vec![1.0]));
    let grads = Scalars(Array1::from_vec(vec![f64::NAN]));
    let mut m = Scalars(Array1::zeros(1));
    let mut v = Scalars(Array1::zeros(1));
    match adamw_step(&mut params, &grads, &mut m, &mut v, 1, &AdamConfig::default()) {
        Err(Error::NonFinite { what, .. }) => assert!(what.contains("theta"), "got {what}"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
    // aborted before mutating anything
    assert_eq!(params.0[0], 1.0);
    assert_eq!(m.0[0], 0.0);
}

// ---------------------------------------------------------------------
// pretraining loop
// ---------------------------------------------------------------------

fn tiny_corpus(docs: usize, topics: usize, seed: u64) -> crate::corpus::Corpus {
    generate_corpus(&GenSpec {
        num_topics: topics,
        vocab_size: 256,
        docs,
        mean_length: 64.0,
        sd_length: 12.0,
        topics_per_doc: (1, 1),
        zipf_exponent: 1.1,
        seed,
        task_kind: TaskKind::SingleLabel,
    })
    .unwrap()
}

fn tiny_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        embed_dim: 8,
        num_layers: 1,
        window: 4,
        ffn_dim: 12,
        dropout_p: 0.1,
        mask_rate: 0.15,
        proj_dim: 8,
        pooling: Pooling::Mean,
        max_len: 256,
    }
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: 1e-3,
        checkpoint_every: 50,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_is_bit_deterministic() {
    let corpus = tiny_corpus(16, 3, 1);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(4, enc.proj_dim);
    let cfg = tiny_train(30);
    let a = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCseBregman, |_| Ok(())).unwrap();
    let b = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCseBregman, |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.json");
    let pb = dir.path().join("b.json");
    save_checkpoint(&a, &pa).unwrap();
    save_checkpoint(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn zero_steps_are_rejected() {
    let corpus = tiny_corpus(8, 2, 2);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(4, enc.proj_dim);
    let cfg = TrainConfig {
        steps: 0,
        ..tiny_train(1)
    };
    let err = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCse, |_| Ok(())).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
}

#[test]
fn oversized_batch_is_rejected() {
    let corpus = tiny_corpus(8, 2, 3);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(4, enc.proj_dim);
    let cfg = TrainConfig {
        batch_size: 9,
        ..tiny_train(5)
    };
    assert!(pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCse, |_| Ok(())).is_err());
}

#[test]
fn simcse_mode_equals_bregman_mode_with_zero_lambda() {
    // Both modes must consume the same randomness and produce identical
    // loss histories when the divergence weight is zero.
    let corpus = tiny_corpus(16, 3, 4);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::mlp(4, enc.proj_dim, 6, true);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..tiny_train(40)
    };
    let a = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCse, |_| Ok(())).unwrap();
    let b = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCseBregman, |_| Ok(())).unwrap();
    assert_eq!(a.loss_history.len(), b.loss_history.len());
    for (ra, rb) in a.loss_history.iter().zip(b.loss_history.iter()) {
        assert_eq!(ra.mnr.to_bits(), rb.mnr.to_bits());
        assert_eq!(ra.bregman.to_bits(), rb.bregman.to_bits());
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
}

#[test]
fn checkpoints_fire_on_schedule() {
    let corpus = tiny_corpus(12, 2, 5);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(4, enc.proj_dim);
    let cfg = TrainConfig {
        checkpoint_every: 10,
        ..tiny_train(35)
    };
    let mut steps_seen = Vec::new();
    pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCse, |c| {
        steps_seen.push(c.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps_seen, vec![10, 20, 30]);
}

#[test]
fn training_reduces_the_smoothed_ranking_loss() {
    let corpus = tiny_corpus(48, 4, 6);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(4, enc.proj_dim);
    let cfg = TrainConfig {
        lr: 3e-3,
        ..tiny_train(300)
    };
    let ckpt = pretrain(&corpus, &enc, &ens, &cfg, TrainMode::SimCseBregman, |_| Ok(())).unwrap();
    let window = 50;
    let first: f64 = ckpt.loss_history[..window]
        .iter()
        .map(|r| r.mnr)
        .sum::<f64>()
        / window as f64;
    let last: f64 = ckpt.loss_history[ckpt.loss_history.len() - window..]
        .iter()
        .map(|r| r.mnr)
        .sum::<f64>()
        / window as f64;
    assert!(
        last < first,
        "smoothed mnr did not decrease: first {first}, last {last}"
    );
}

#[test]
fn every_subnetwork_receives_gradient() {
    let corpus = tiny_corpus(24, 3, 7);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(6, enc.proj_dim);
    let ckpt = pretrain(
        &corpus,
        &enc,
        &ens,
        &tiny_train(120),
        TrainMode::SimCseBregman,
        |_| Ok(()),
    )
    .unwrap();
    for (k, &norm) in ckpt.subnet_grad_l2.iter().enumerate() {
        assert!(norm > 0.0, "subnetwork {k} accumulated zero gradient");
    }
}

// ---------------------------------------------------------------------
// checkpoint round trip
// ---------------------------------------------------------------------

#[test]
fn checkpoint_round_trip_preserves_eval_outputs_bitwise() {
    let corpus = tiny_corpus(12, 2, 8);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::mlp(3, enc.proj_dim, 5, true);
    let ckpt = pretrain(
        &corpus,
        &enc,
        &ens,
        &tiny_train(25),
        TrainMode::SimCseBregman,
        |_| Ok(()),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let tokens = &corpus.documents[0].token_ids;
    let (a, _) = encode(tokens, &ckpt.model.encoder, &enc, Mode::Eval, None).unwrap();
    let (b, _) = encode(tokens, &loaded.model.encoder, &enc, Mode::Eval, None).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(ckpt.model, loaded.model);
    assert_eq!(ckpt.adam_m, loaded.adam_m);
    assert_eq!(ckpt.rng_state, loaded.rng_state);
}

#[test]
fn truncated_checkpoint_is_a_corruption_error() {
    let corpus = tiny_corpus(8, 2, 9);
    let enc = tiny_encoder(corpus.vocab.len());
    let ens = EnsembleConfig::affine(3, enc.proj_dim);
    let ckpt = init_checkpoint(&enc, &ens, &tiny_train(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint(_))
    ));
    let _ = corpus;
}

#[test]
fn unknown_format_version_is_rejected() {
    let enc = tiny_encoder(256);
    let ens = EnsembleConfig::affine(3, enc.proj_dim);
    let ckpt = init_checkpoint(&enc, &ens, &tiny_train(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"format_version\":1", "\"format_version\":99");
    std::fs::write(&path, text).unwrap();
    match load_checkpoint(&path) {
        Err(Error::UnsupportedVersion { found, expected }) => {
            assert_eq!(found, 99);
            assert_eq!(expected, CHECKPOINT_VERSION);
        }
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn rng_state_round_trips_through_serialization() {
    let mut rng = seeded(99);
    let _: u64 = rng.random();
    let state = RngState::capture(&rng);
    let mut restored = state.restore().unwrap();
    let a: u64 = rng.random();
    let b: u64 = restored.random();
    assert_eq!(a, b);
}

#[test]
fn loss_history_csv_has_header_and_rows() {
    let history = vec![
        LossRecord {
            step: 1,
            mnr: 1.5,
            bregman: 0.25,
            total: 2.0,
        },
        LossRecord {
            step: 2,
            mnr: 1.25,
            bregman: 0.25,
            total: 1.75,
        },
    ];
    let csv = loss_history_csv(&history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,mnr,bregman,total");
    assert_eq!(lines[1], "1,1.5,0.25,2");
    assert_eq!(lines.len(), 3);
}

// ---------------------------------------------------------------------
// gradient harness over the losses
// ---------------------------------------------------------------------

#[test]
fn mnr_pipeline_gradient_passes_the_harness() {
    // N=4, m=8: loss over cosine similarities of two free matrices.
    let mut rng = seeded(50);
    let mut mk = |_| {
        let mut m = Array2::zeros((4, 8));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    };
    let s_a: Array2<f64> = mk(0);
    let s_b: Array2<f64> = mk(1);

    let cos = crate::objectives::cosine_sim_matrix(&s_a, &s_b).unwrap();
    let (_, d_sim) = crate::objectives::mnr_loss(&cos.sim, 0.1);
    let (d_a, d_b) = cos.backward(&d_sim);
    let analytic: Vec<f64> = d_a.iter().chain(d_b.iter()).copied().collect();
    let theta: Vec<f64> = s_a.iter().chain(s_b.iter()).copied().collect();

    let mut f = |flat: &[f64]| {
        let a = Array2::from_shape_vec((4, 8), flat[..32].to_vec()).unwrap();
        let b = Array2::from_shape_vec((4, 8), flat[32..].to_vec()).unwrap();
        let cos = crate::objectives::cosine_sim_matrix(&a, &b).unwrap();
        crate::objectives::mnr_loss(&cos.sim, 0.1).0
    };
    let err = grad_check(&mut f, &theta, &analytic, 1e-5, 300, &mut seeded(51));
    assert!(err <= 1e-4, "mnr pipeline gradient error {err}");
}

#[test]
fn bregman_pipeline_gradient_passes_the_harness_in_both_modes() {
    // N=4, m=8, g=5 per the gradient-correctness criterion.
    for config in [
        EnsembleConfig::affine(5, 8),
        EnsembleConfig::mlp(5, 8, 6, true),
    ] {
        let mut rng = seeded(60);
        let (ensemble, s_a, s_b) = loop {
            let ensemble =
                crate::objectives::SubnetEnsemble::init(config, &mut rng).unwrap();
            let mut mk = || {
                let mut m = Array2::zeros((4, 8));
                for v in m.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                m
            };
            let s_a = mk();
            let s_b = mk();
            let mut stacked = Array2::zeros((8, 8));
            stacked.slice_mut(ndarray::s![..4, ..]).assign(&s_a);
            stacked.slice_mut(ndarray::s![4.., ..]).assign(&s_b);
            let (scores, trace) =
                ensemble.score_batch(stacked.view(), crate::objectives::StatsMode::Batch);
            let mut margin = f64::INFINITY;
            for row in scores.rows() {
                let mut sorted: Vec<f64> = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                margin = margin.min(sorted[0] - sorted[1]);
            }
            if margin > 1e-3 && trace.min_relu_margin() > 1e-3 {
                break (ensemble, s_a, s_b);
            }
        };

        let out = crate::objectives::bregman_loss(&s_a, &s_b, &ensemble, 2.0);
        let mut theta: Vec<f64> = s_a.iter().chain(s_b.iter()).copied().collect();
        theta.extend(flatten_trainable(&ensemble));
        let mut analytic: Vec<f64> = out.d_s_a.iter().chain(out.d_s_b.iter()).copied().collect();
        analytic.extend(flatten_trainable(&out.grads));

        let ens_clone = ensemble.clone();
        let mut f = move |flat: &[f64]| {
            let a = Array2::from_shape_vec((4, 8), flat[..32].to_vec()).unwrap();
            let b = Array2::from_shape_vec((4, 8), flat[32..64].to_vec()).unwrap();
            let mut probe = ens_clone.clone();
            unflatten_trainable(&mut probe, &flat[64..]);
            crate::objectives::bregman_loss(&a, &b, &probe, 2.0).loss
        };
        let err = grad_check(&mut f, &theta, &analytic, 1e-5, 300, &mut seeded(61));
        assert!(err <= 1e-4, "bregman pipeline error {err} in {config:?}");
    }
}
