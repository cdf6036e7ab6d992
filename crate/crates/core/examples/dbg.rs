// debug which ensemble tensor's FD gradient disagrees
use longcse::objectives::*;
use longcse::rng::seeded;
use longcse::tensors::{flatten_trainable, unflatten_trainable, NamedTensors};
use ndarray::Array2;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() { *v = rng.random_range(-1.5..1.5); }
    m
}

fn main() {
    let mut rng = seeded(53);
    let config = EnsembleConfig::mlp(5, 8, 6, true);
    let n = 4;
    // replicate conditioned_instance
    let (e, s_a, s_b) = loop {
        let e = SubnetEnsemble::init(config, &mut rng).unwrap();
        let s_a = random_matrix(n, config.input_dim, &mut rng);
        let s_b = random_matrix(n, config.input_dim, &mut rng);
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
        if margin > 1e-3 && trace.min_relu_margin() > 1e-3 { break (e, s_a, s_b); }
    };
    let out = bregman_loss(&s_a, &s_b, &e, 2.0);
    let flat = flatten_trainable(&e);
    let analytic = flatten_trainable(&out.grads);
    let names: Vec<(String, usize)> = e.trainable().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let step = 1e-5;
    for i in 0..flat.len() {
        let mut probe = flat.clone();
        probe[i] = flat[i] + step;
        let mut pe = e.clone(); unflatten_trainable(&mut pe, &probe);
        let up = bregman_loss(&s_a, &s_b, &pe, 2.0).loss;
        probe[i] = flat[i] - step;
        let mut pe = e.clone(); unflatten_trainable(&mut pe, &probe);
        let down = bregman_loss(&s_a, &s_b, &pe, 2.0).loss;
        let fd = (up - down) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
        if err > worst.1 { worst = (i, err, analytic[i], fd); }
    }
    // map index to name
    let mut offset = 0;
    for (name, len) in &names {
        if worst.0 < offset + len {
            println!("worst: {} [{}] err {:.3e} analytic {:.6e} fd {:.6e}", name, worst.0 - offset, worst.1, worst.2, worst.3);
            break;
        }
        offset += len;
    }
}
