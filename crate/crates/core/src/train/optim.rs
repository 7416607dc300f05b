use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One Adam update with decoupled weight decay.
///
/// `grads[i]` belongs to the i-th parameter of the store; `None` counts as a
/// zero gradient. Parameters are left untouched if any gradient is not finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients / {} moments for {} parameters", grads.len(), state.m.len(), params.len())));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!("gradient of `{}` has shape {:?}", params.name(id), g.shape())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", params.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
    let c1 = T::one() - T::c(BETA1.powi(t));
    let c2 = T::one() - T::c(BETA2.powi(t));
    let (lr, eps, shrink) = (T::c(lr), T::c(ADAM_EPS), T::one() - T::c(lr * weight_decay));
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let w = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..w.len() {
            let g = grads[i].as_ref().map_or(T::zero(), |g| g.data()[j]);
            w[j] *= shrink;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
