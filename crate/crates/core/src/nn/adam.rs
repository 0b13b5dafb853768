//! Adam optimizer with bias-corrected moment estimates.

use super::tensor::{ParameterStore, Tensor};
use crate::error::Result;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(store: &ParameterStore, lr: f64) -> Adam {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update from the gradients accumulated in the store.
    /// Fails (naming the tensor) if any value or gradient went non-finite.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        store.check_finite()?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            let grad = store.grad(id).data().to_vec();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (i, &g) in grad.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            }
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.check_finite()
    }
}
