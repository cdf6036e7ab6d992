use approx::assert_abs_diff_eq;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::seeded;

fn random_matrix(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    m
}

/// Central finite difference of `f` at `theta`, one coordinate at a time.
fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Worst relative error with a 1e-6 floor: coordinates whose gradient is
/// below the floor are compared absolutely at that scale, which keeps
/// central-difference rounding noise (~1e-11 here) from dominating.
fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------
// cosine similarity
// ---------------------------------------------------------------------

#[test]
fn cosine_of_orthonormal_rows_is_identity() {
    let s = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let cos = cosine_sim_matrix(&s, &s).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(cos.sim[[i, j]], expected, epsilon = 1e-12);
        }
    }
}

#[test]
fn cosine_matches_hand_values() {
    let a = array![[1.0, 0.0], [1.0, 1.0]];
    let b = array![[0.0, 1.0], [1.0, 1.0]];
    let cos = cosine_sim_matrix(&a, &b).unwrap();
    assert_abs_diff_eq!(cos.sim[[0, 0]], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(cos.sim[[1, 1]], 1.0, epsilon = 1e-12);
}

#[test]
fn cosine_matches_bruteforce_pairwise_loop() {
    let mut rng = seeded(3);
    let a = random_matrix(5, 7, &mut rng);
    let b = random_matrix(5, 7, &mut rng);
    let cos = cosine_sim_matrix(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for c in 0..7 {
                dot += a[[i, c]] * b[[j, c]];
                na += a[[i, c]] * a[[i, c]];
                nb += b[[j, c]] * b[[j, c]];
            }
            let expected = dot / (na.sqrt() * nb.sqrt());
            assert_abs_diff_eq!(cos.sim[[i, j]], expected, epsilon = 1e-12);
        }
    }
}

#[test]
fn cosine_rejects_zero_rows() {
    let a = array![[1.0, 0.0], [0.0, 0.0]];
    let b = array![[1.0, 0.0], [0.0, 1.0]];
    assert!(matches!(
        cosine_sim_matrix(&a, &b),
        Err(crate::Error::DegenerateEmbedding(_))
    ));
}

#[test]
fn cosine_backward_matches_finite_differences() {
    let mut rng = seeded(11);
    let a0 = random_matrix(4, 6, &mut rng);
    let b0 = random_matrix(4, 6, &mut rng);
    // Scalar head: sum of sim entries weighted by fixed coefficients.
    let coeff = random_matrix(4, 4, &mut rng);
    let head = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        let cos = cosine_sim_matrix(a, b).unwrap();
        (&cos.sim * &coeff).sum()
    };
    let cos = cosine_sim_matrix(&a0, &b0).unwrap();
    let (d_a, d_b) = cos.backward(&coeff);

    let flat_a: Vec<f64> = a0.iter().copied().collect();
    let mut f_a = |theta: &[f64]| {
        let a = Array2::from_shape_vec((4, 6), theta.to_vec()).unwrap();
        head(&a, &b0)
    };
    let fd_a = fd_gradient(&mut f_a, &flat_a, 1e-6);
    let analytic_a: Vec<f64> = d_a.iter().copied().collect();
    assert!(max_rel_err(&analytic_a, &fd_a) < 1e-6);

    let flat_b: Vec<f64> = b0.iter().copied().collect();
    let mut f_b = |theta: &[f64]| {
        let b = Array2::from_shape_vec((4, 6), theta.to_vec()).unwrap();
        head(&a0, &b)
    };
    let fd_b = fd_gradient(&mut f_b, &flat_b, 1e-6);
    let analytic_b: Vec<f64> = d_b.iter().copied().collect();
    assert!(max_rel_err(&analytic_b, &fd_b) < 1e-6);
}

// ---------------------------------------------------------------------
// ranking loss
// ---------------------------------------------------------------------

#[test]
fn mnr_loss_single_row_is_zero() {
    let sim = array![[0.37]];
    let (loss, _) = mnr_loss(&sim, 0.1);
    assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-15);
}

#[test]
fn mnr_loss_of_constant_matrix_is_ln_n() {
    // Uniform softmax: every row contributes exactly ln N.
    for n in [2, 4, 7] {
        let sim = Array2::from_elem((n, n), 0.42);
        let (loss, _) = mnr_loss(&sim, 0.1);
        assert_abs_diff_eq!(loss, (n as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn mnr_loss_matches_closed_form_on_diagonal_instance() {
    // sim has 1 on the diagonal and -1 off it; at T = 0.1 each row gives
    // ln(exp(10) + 3 exp(-10)) - 10 = ln(1 + 3 exp(-20)).
    let n = 4;
    let mut sim = Array2::from_elem((n, n), -1.0);
    for i in 0..n {
        sim[[i, i]] = 1.0;
    }
    let (loss, _) = mnr_loss(&sim, 0.1);
    let expected = (1.0 + 3.0 * (-20.0f64).exp()).ln();
    assert_abs_diff_eq!(loss, expected, epsilon = 1e-15);
}

#[test]
fn mnr_gradient_matches_finite_differences() {
    // Similarities stay in cosine range so softmax probabilities at
    // T = 0.1 are large enough for a relative comparison.
    let mut rng = seeded(5);
    let sim0 = random_matrix(5, 5, &mut rng).mapv(|v| v / 3.0);
    let (_, d_sim) = mnr_loss(&sim0, 0.1);
    let flat: Vec<f64> = sim0.iter().copied().collect();
    let mut f = |theta: &[f64]| {
        let sim = Array2::from_shape_vec((5, 5), theta.to_vec()).unwrap();
        mnr_loss(&sim, 0.1).0
    };
    let fd = fd_gradient(&mut f, &flat, 1e-6);
    let analytic: Vec<f64> = d_sim.iter().copied().collect();
    assert!(max_rel_err(&analytic, &fd) < 1e-6);
}

proptest! {
    // Softmax shift invariance: adding a constant to a full row of the
    // similarity matrix leaves the loss unchanged.
    #[test]
    fn mnr_loss_is_invariant_under_row_shifts(
        seed in 0u64..1000,
        row in 0usize..4,
        shift in -3.0f64..3.0,
    ) {
        let mut rng = seeded(seed);
        let sim = random_matrix(4, 4, &mut rng);
        let (base, _) = mnr_loss(&sim, 0.1);
        let mut shifted = sim.clone();
        for j in 0..4 {
            shifted[[row, j]] += shift;
        }
        let (after, _) = mnr_loss(&shifted, 0.1);
        prop_assert!((base - after).abs() < 1e-9, "base {base} vs shifted {after}");
    }
}

// ---------------------------------------------------------------------
// ensemble scores and divergence
// ---------------------------------------------------------------------

fn affine_ensemble(weights: Array2<f64>, biases: Array1<f64>) -> SubnetEnsemble {
    let config = EnsembleConfig::affine(weights.nrows(), weights.ncols());
    SubnetEnsemble {
        config,
        params: super::bregman::EnsembleParams::Affine { weights, biases },
    }
}

#[test]
fn affine_scores_are_inner_products_plus_bias() {
    // Direct evaluation: w_1 = (1, 0), eps_1 = 0, s = (2, 1) scores 2.
    let e = affine_ensemble(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.5]);
    let scores = subnet_scores(array![2.0, 1.0].view(), &e);
    assert_abs_diff_eq!(scores[0], 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(scores[1], 1.5, epsilon = 1e-15);
}

#[test]
fn zero_weights_score_their_biases() {
    let e = affine_ensemble(Array2::zeros((3, 4)), array![0.1, -0.2, 0.3]);
    let scores = subnet_scores(Array1::zeros(4).view(), &e);
    assert_eq!(scores, vec![0.1, -0.2, 0.3]);
}

#[test]
fn argmax_breaks_ties_toward_lowest_index() {
    assert_eq!(argmax_subnet_scores(&[2.0, 1.0]), 0);
    assert_eq!(argmax_subnet_scores(&[3.0, 3.0]), 0);
    assert_eq!(argmax_subnet_scores(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn argmax_matches_linear_scan_oracle() {
    let mut rng = seeded(17);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = argmax_subnet_scores(&scores);
        let mut slow = 0;
        for i in 0..scores.len() {
            if scores[i] > scores[slow] {
                slow = i;
            }
        }
        assert_eq!(fast, slow);
    }
}

#[test]
fn divergence_of_identical_inputs_is_exactly_zero() {
    let mut rng = seeded(23);
    for mode in [SubnetMode::Affine, SubnetMode::Mlp] {
        let config = match mode {
            SubnetMode::Affine => EnsembleConfig::affine(5, 6),
            SubnetMode::Mlp => EnsembleConfig::mlp(5, 6, 4, true),
        };
        let e = SubnetEnsemble::init(config, &mut rng).unwrap();
        for _ in 0..50 {
            let s: Array1<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(bregman_divergence(s.view(), s.view(), &e), 0.0);
        }
    }
}

#[test]
fn divergence_matches_hand_computed_example() {
    // w_1 = (1,0), w_2 = (0,1), zero biases, s_a = (2,1), s_b = (0,3):
    // s_a scores (2, 1) so a_hat = 0; s_b scores (0, 3) so b_hat = 1;
    // G = score_0(s_a) - score_1(s_a) = 2 - 1 = 1.
    let e = affine_ensemble(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
    let g = bregman_divergence(array![2.0, 1.0].view(), array![0.0, 3.0].view(), &e);
    assert_abs_diff_eq!(g, 1.0, epsilon = 1e-15);
}

#[test]
fn divergence_is_nonnegative_on_random_draws() {
    // Argmax-dominance property oracle over 10^4 random instances per mode.
    let mut rng = seeded(31);
    for mode in [SubnetMode::Affine, SubnetMode::Mlp] {
        for trial in 0..10_000 {
            let config = match mode {
                SubnetMode::Affine => EnsembleConfig::affine(2 + trial % 7, 4),
                SubnetMode::Mlp => EnsembleConfig::mlp(2 + trial % 7, 4, 3, trial % 2 == 0),
            };
            let e = SubnetEnsemble::init(config, &mut rng).unwrap();
            let s_a: Array1<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s_b: Array1<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = bregman_divergence(s_a.view(), s_b.view(), &e);
            assert!(g >= 0.0, "negative divergence {g} in mode {mode:?}");
        }
    }
}

// ---------------------------------------------------------------------
// kernel
// ---------------------------------------------------------------------

#[test]
fn kernel_of_zero_divergence_is_one() {
    assert_eq!(kernel_similarity(0.0, 2.0), 1.0);
}

#[test]
fn kernel_matches_direct_evaluation() {
    // G = 2, sigma = 1: exp(-2 / 2) = exp(-1).
    assert_abs_diff_eq!(kernel_similarity(2.0, 1.0), (-1.0f64).exp(), epsilon = 1e-15);
}

#[test]
fn kernel_is_strictly_decreasing() {
    let mut last = kernel_similarity(0.0, 2.0);
    for i in 1..100 {
        let next = kernel_similarity(i as f64 * 0.1, 2.0);
        assert!(next < last);
        last = next;
    }
}

#[test]
#[should_panic(expected = "negative divergence")]
fn kernel_panics_on_negative_divergence() {
    kernel_similarity(-0.1, 1.0);
}

// ---------------------------------------------------------------------
// divergence loss
// ---------------------------------------------------------------------

#[test]
fn bregman_loss_single_row_is_zero() {
    let mut rng = seeded(41);
    let e = SubnetEnsemble::init(EnsembleConfig::affine(3, 4), &mut rng).unwrap();
    let s_a = random_matrix(1, 4, &mut rng);
    let s_b = random_matrix(1, 4, &mut rng);
    let out = bregman_loss(&s_a, &s_b, &e, 2.0);
    assert_abs_diff_eq!(out.loss, 0.0, epsilon = 1e-15);
}

#[test]
fn bregman_loss_with_identical_subnetworks_is_ln_n() {
    // All subnetworks equal: every divergence is 0, psi is all ones, and
    // the softmax is uniform.
    let weights = Array2::from_shape_fn((4, 3), |(_, j)| 0.3 + 0.1 * j as f64);
    let e = affine_ensemble(weights, Array1::from_elem(4, 0.25));
    let mut rng = seeded(43);
    let s_a = random_matrix(5, 3, &mut rng);
    let s_b = random_matrix(5, 3, &mut rng);
    let out = bregman_loss(&s_a, &s_b, &e, 2.0);
    assert_abs_diff_eq!(out.loss, 5.0f64.ln(), epsilon = 1e-12);
    assert!(out.psi.iter().all(|&p| p == 1.0));
}

#[test]
fn bregman_loss_stays_in_kernel_range_bound() {
    // psi in (0,1] forces the loss into [0, ln N + 1].
    let mut rng = seeded(47);
    for trial in 0..50 {
        let mode_mlp = trial % 2 == 0;
        let config = if mode_mlp {
            EnsembleConfig::mlp(4, 6, 5, true)
        } else {
            EnsembleConfig::affine(4, 6)
        };
        let e = SubnetEnsemble::init(config, &mut rng).unwrap();
        let n = 2 + trial % 5;
        let s_a = random_matrix(n, 6, &mut rng);
        let s_b = random_matrix(n, 6, &mut rng);
        let out = bregman_loss(&s_a, &s_b, &e, 1.5);
        let bound = (n as f64).ln() + 1.0;
        assert!(
            out.loss >= 0.0 && out.loss <= bound,
            "loss {} outside [0, {bound}]",
            out.loss
        );
        assert!(out.psi.iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

/// Builds a well-conditioned random instance: argmax margins and relu
/// pre-activations stay away from the finite-difference step so the
/// piecewise-smooth structure does not change under perturbation.
fn conditioned_instance(
    config: EnsembleConfig,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (SubnetEnsemble, Array2<f64>, Array2<f64>) {
    loop {
        let e = SubnetEnsemble::init(config, rng).unwrap();
        let s_a = random_matrix(n, config.input_dim, rng);
        let s_b = random_matrix(n, config.input_dim, rng);
        let mut stacked = Array2::zeros((2 * n, config.input_dim));
        stacked.slice_mut(ndarray::s![..n, ..]).assign(&s_a);
        stacked.slice_mut(ndarray::s![n.., ..]).assign(&s_b);
        let (scores, trace) = e.score_batch(stacked.view(), StatsMode::Batch);
        let mut margin = f64::INFINITY;
        for row in scores.rows() {
            let mut sorted: Vec<f64> = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            margin = margin.min(sorted[0] - sorted[1]);
        }
        if margin > 1e-3 && trace.min_relu_margin() > 1e-3 {
            return (e, s_a, s_b);
        }
    }
}

#[test]
fn bregman_loss_gradients_match_finite_differences() {
    let mut rng = seeded(53);
    for config in [
        EnsembleConfig::affine(5, 8),
        EnsembleConfig::mlp(5, 8, 6, true),
        EnsembleConfig::mlp(5, 8, 6, false),
    ] {
        let n = 4;
        let (e, s_a, s_b) = conditioned_instance(config, n, &mut rng);
        let out = bregman_loss(&s_a, &s_b, &e, 2.0);

        // Inputs, branch a.
        let flat_a: Vec<f64> = s_a.iter().copied().collect();
        let mut f_a = |theta: &[f64]| {
            let m = Array2::from_shape_vec(s_a.dim(), theta.to_vec()).unwrap();
            bregman_loss(&m, &s_b, &e, 2.0).loss
        };
        let fd_a = fd_gradient(&mut f_a, &flat_a, 1e-5);
        let analytic_a: Vec<f64> = out.d_s_a.iter().copied().collect();
        let err_a = max_rel_err(&analytic_a, &fd_a);
        assert!(err_a < 1e-4, "branch a rel err {err_a} in {config:?}");

        // Inputs, branch b (gradient flows only through shared batch
        // statistics; zero in affine mode).
        let flat_b: Vec<f64> = s_b.iter().copied().collect();
        let mut f_b = |theta: &[f64]| {
            let m = Array2::from_shape_vec(s_b.dim(), theta.to_vec()).unwrap();
            bregman_loss(&s_a, &m, &e, 2.0).loss
        };
        let fd_b = fd_gradient(&mut f_b, &flat_b, 1e-5);
        let analytic_b: Vec<f64> = out.d_s_b.iter().copied().collect();
        let err_b = max_rel_err(&analytic_b, &fd_b);
        assert!(err_b < 1e-4, "branch b rel err {err_b} in {config:?}");

        // Ensemble parameters.
        let flat_e = crate::tensors::flatten_trainable(&e);
        let mut f_e = |theta: &[f64]| {
            let mut probe = e.clone();
            crate::tensors::unflatten_trainable(&mut probe, theta);
            bregman_loss(&s_a, &s_b, &probe, 2.0).loss
        };
        let fd_e = fd_gradient(&mut f_e, &flat_e, 1e-5);
        let analytic_e = crate::tensors::flatten_trainable(&out.grads);
        let err_e = max_rel_err(&analytic_e, &fd_e);
        assert!(err_e < 1e-4, "ensemble rel err {err_e} in {config:?}");
    }
}

// ---------------------------------------------------------------------
// combined loss
// ---------------------------------------------------------------------

#[test]
fn total_loss_combines_components() {
    let b = total_loss(1.0, 0.5, 2.0);
    assert_eq!(b.total, 2.0);
    let pure = total_loss(0.7, 0.9, 0.0);
    assert_eq!(pure.total, pure.mnr);
    let any = total_loss(0.31, 0.77, 1.3);
    assert!((any.total - (any.mnr + any.lambda * any.bregman)).abs() < 1e-12);
}

#[test]
fn configs_validate_their_bounds() {
    assert!(ContrastiveConfig { temperature: 0.0 }.validate().is_err());
    assert!(ContrastiveConfig::default().validate().is_ok());
    assert!(BregmanConfig {
        sigma: -1.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(BregmanConfig {
        lambda: -0.1,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(BregmanConfig::default().validate().is_ok());
}
