//! Reverse-mode differentiation, loss, optimizer and the training loop.

mod adjoint;
pub mod check;
mod tape;
pub mod train;

pub use adjoint::{
    conv2d_backward, layernorm_backward, linear_backward, selective_scan_backward, silu_backward, softplus_backward,
    ScanGrads,
};
pub use tape::{GradTape, Gradients, Var};
pub use train::{train, LossPoint, Schedule, TrainOptions, TrainOutcome, TrainPair};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(dim_err!("l1_loss: {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let total: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.numel() as f64)
}

/// Moments and step counter for bias-corrected Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!("adam_step: {} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        p.expect_same_shape(g)?;
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
