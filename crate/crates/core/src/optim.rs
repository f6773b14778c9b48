//! Adam optimizer with classic L2 regularization (weight decay folded into
//! the gradient before the moment updates).

use crate::params::{ParamId, ParamSet};
use crate::scalar::{s, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    /// Moment buffers are allocated for the trainable parameters of `params`,
    /// aligned by position; the same set must be passed to every step.
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>) -> Self {
        let ids = params.trainable_ids();
        let m = ids.iter().map(|&id| Tensor::zeros(params.get(id).shape().to_vec())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(params.get(id).shape().to_vec())).collect();
        Adam { cfg, ids, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update using the gradients accumulated on `tape`.
    /// Parameters that were not bound on this tape, or received no gradient,
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, tape: &Tape<S>) {
        self.t += 1;
        let b1 = s::<S>(self.cfg.beta1);
        let b2 = s::<S>(self.cfg.beta2);
        let lr = s::<S>(self.cfg.lr);
        let eps = s::<S>(self.cfg.eps);
        let wd = s::<S>(self.cfg.weight_decay);
        let bc1 = S::one() - s::<S>(self.cfg.beta1.powi(self.t as i32));
        let bc2 = S::one() - s::<S>(self.cfg.beta2.powi(self.t as i32));
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(node) = tape.bound(id) else { continue };
            let Some(grad) = tape.grad(node) else { continue };
            let theta = params.get_mut(id);
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for ((t, g), (mi, vi)) in theta
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = *g + wd * *t;
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *t = *t - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
