use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::TrainConfig;

/// Adam moments for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// L2 norm of all gradients taken together.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p -= lr * (m̂ / (√v̂ + ε) + wd * p)`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("parameter {k}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(format!("#{k}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (b1, b2, c1, c2) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2));
    let (lr, eps, wd) = (T::of(lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let one = T::one();
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m * c1) / ((*v * c2).sqrt() + eps) + wd * *x;
            *x -= lr * update;
        }
    }
    Ok(())
}
