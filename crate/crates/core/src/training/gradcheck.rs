//! Finite-difference gradient verification.

use rand_chacha::ChaCha8Rng;

/// Compares an analytic gradient against central finite differences of `f`
/// over a random subset of at least `min(max_coords, len)` coordinates,
/// returning the worst relative error.
///
/// Relative error uses the larger magnitude as the denominator with a
/// floor of 1e-6, so coordinates whose gradient is essentially zero are
/// compared absolutely at that scale instead of amplifying rounding noise.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    assert!(step > 0.0, "step must be positive");
    let coords = sample_coords(theta.len(), max_coords, rng);

    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in &coords {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn sample_coords(len: usize, max_coords: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    if len <= max_coords {
        return (0..len).collect();
    }
    // Partial Fisher-Yates over the index range.
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..max_coords {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(max_coords);
    pool
}
