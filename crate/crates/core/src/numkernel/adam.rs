use super::{Scalar, Tensor};
use crate::error::Result;

/// First/second moment estimates and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub t: u64,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(shape: &[usize]) -> Self {
        Self::with_hyper(shape, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            beta1: S::from_f64_lossy(beta1),
            beta2: S::from_f64_lossy(beta2),
            eps: S::from_f64_lossy(eps),
        }
    }
}

/// One bias-corrected Adam step on `params` with gradient `grads`.
pub fn adam_step<S: Scalar>(
    params: &mut Tensor<S>,
    grads: &Tensor<S>,
    state: &mut AdamState<S>,
    lr: S,
) -> Result<()> {
    grads.expect_shape(params.shape())?;
    state.m.expect_shape(params.shape())?;
    state.v.expect_shape(params.shape())?;
    state.t += 1;
    let one = S::one();
    let t = state.t as i32;
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    if params.is_finite() {
        Ok(())
    } else {
        Err(crate::Error::NonFinite("adam_step"))
    }
}
