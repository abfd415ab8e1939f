//! Learning-rate schedule and the AdamW optimizer.

use crate::tensor::tape::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Linear warmup to `peak_lr` over `warmup_steps`, then per-step exponential
/// decay: lr(s) = peak * s / warmup for s <= warmup, peak * gamma^(s - warmup)
/// afterwards. Steps count from 0.
pub fn lr_at(step: usize, peak_lr: f64, warmup_steps: usize, gamma: f64) -> f64 {
    if step <= warmup_steps && warmup_steps > 0 {
        peak_lr * step as f64 / warmup_steps as f64
    } else {
        peak_lr * gamma.powi((step - warmup_steps) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct OptimizerState<E: Scalar> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    step: usize,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn for_params(params: &ParamSet<E>) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

impl AdamW {
    /// Decoupled weight decay (p *= 1 - lr*wd) followed by a bias-corrected
    /// Adam update from the accumulated gradients.
    pub fn step<E: Scalar>(
        &self,
        params: &mut ParamSet<E>,
        state: &mut OptimizerState<E>,
        lr: f64,
    ) {
        state.step += 1;
        let t = state.step as i32;
        let b1 = E::from_f64c(self.beta1);
        let b2 = E::from_f64c(self.beta2);
        let one = E::one();
        let corr1 = E::from_f64c(1.0 - self.beta1.powi(t));
        let corr2 = E::from_f64c(1.0 - self.beta2.powi(t));
        let lr_e = E::from_f64c(lr);
        let eps = E::from_f64c(self.eps);
        let decay = E::from_f64c(1.0 - lr * self.weight_decay);

        for (pi, p) in params.iter_mut().enumerate() {
            let m = state.m[pi].data_mut();
            let v = state.v[pi].data_mut();
            let g = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                value[i] = value[i] * decay;
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                value[i] = value[i] - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<E: Scalar>(params: &mut ParamSet<E>, max_norm: f64) -> f64 {
    let mut sumsq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.data() {
            let g = g.to_f64c();
            sumsq += g * g;
        }
    }
    let norm = sumsq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64c(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}
