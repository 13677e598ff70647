use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + one_b1 * *g;
            *v = b2 * *v + one_b2 * *g * *g;
            *p = *p * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// Piecewise-constant learning rate: `base` until `decay_step`, then
/// `base * factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub decay_step: usize,
    pub factor: f64,
}

impl StepDecay {
    pub fn new(base: f64, total_steps: usize, decay_at: f64, factor: f64) -> Self {
        Self {
            base,
            decay_step: libm::floor(total_steps as f64 * decay_at) as usize,
            factor,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.decay_step {
            self.base * self.factor
        } else {
            self.base
        }
    }
}
