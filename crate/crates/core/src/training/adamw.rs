//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::NamedTensors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay update over every trainable tensor:
///
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
///
/// `t` is the 1-based step for bias correction. Aborts without touching
/// any tensor when a gradient is non-finite, naming the tensor.
pub fn adamw_step<P, G>(
    params: &mut P,
    grads: &G,
    moment1: &mut P,
    moment2: &mut P,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()>
where
    P: NamedTensors,
    G: NamedTensors,
{
    assert!(t >= 1, "bias correction needs a 1-based step");
    for (name, g) in grads.trainable() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                step: t,
            });
        }
    }

    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    let mut theta = params.trainable_mut();
    let g = grads.trainable();
    let mut m = moment1.trainable_mut();
    let mut v = moment2.trainable_mut();
    assert_eq!(theta.len(), g.len(), "parameter/gradient layout mismatch");
    for i in 0..theta.len() {
        debug_assert_eq!(theta[i].0, g[i].0, "tensor order mismatch");
        let it = theta[i]
            .1
            .iter_mut()
            .zip(g[i].1.iter())
            .zip(m[i].1.iter_mut().zip(v[i].1.iter_mut()));
        for ((th, &gr), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *th);
        }
    }
    Ok(())
}
