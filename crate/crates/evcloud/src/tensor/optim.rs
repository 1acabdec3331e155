//! Parameters and the Adam optimizer.

use super::{Real, Tensor};

/// A named, trainable tensor. Names are the stable identity used for
/// checkpointing and gradient lookup.
#[derive(Clone)]
pub struct Param<E: Real> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Real> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Adam with bias correction. One state entry per parameter, addressed by the
/// same index order every step — callers must pass parameters in a fixed
/// order for determinism.
pub struct AdamState<E: Real> {
    beta1: E,
    beta2: E,
    eps: E,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Real> AdamState<E> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            beta1: E::lit(0.9),
            beta2: E::lit(0.999),
            eps: E::lit(1e-8),
            t: 0,
            m: sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![E::zero(); n]).collect(),
        }
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// In-place Adam update for parameter `idx`.
    pub fn update(&mut self, idx: usize, value: &mut [E], grad: &[E], lr: E) {
        assert!(self.t > 0, "call begin_step before update");
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        assert_eq!(m.len(), value.len(), "adam: param {idx} size changed");
        assert_eq!(grad.len(), value.len());
        let (b1, b2) = (self.beta1, self.beta2);
        let one = E::one();
        let t = E::lit(self.t as f64);
        let corr1 = one - b1.powf(t);
        let corr2 = one - b2.powf(t);
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (one - b1) * grad[i];
            v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            value[i] = value[i] - lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Cosine decay from `lr0` to 0 over `total` steps.
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    assert!(total > 0, "cosine_lr: total steps must be positive");
    let frac = (step.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
