//! Adam and AdamW with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; only applied by [`Adam::adamw_step`].
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every parameter of one or more stores, in order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Plain Adam on the stores' current gradients.
    pub fn adam_step(&mut self, stores: &mut [&mut ParamStore]) {
        self.update(stores, false);
    }

    /// AdamW: `p ← p − lr·λ·p`, then the Adam update.
    pub fn adamw_step(&mut self, stores: &mut [&mut ParamStore]) {
        self.update(stores, true);
    }

    fn update(&mut self, stores: &mut [&mut ParamStore], decoupled: bool) {
        if self.first.is_empty() {
            for store in stores.iter() {
                for id in store.ids() {
                    let dim = store.value(id).dim();
                    self.first.push(Matrix::zeros(dim));
                    self.second.push(Matrix::zeros(dim));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut slot = 0;
        for store in stores.iter_mut() {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let g = store.grad(id).clone();
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                assert_eq!(m.dim(), g.dim(), "optimizer state does not match parameter layout");
                let p = store.value_mut(id);
                if decoupled {
                    let decay = lr * weight_decay;
                    p.mapv_inplace(|x| x - decay * x);
                }
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .and(&g)
                    .for_each(|p, m, v, &g| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
                slot += 1;
            }
        }
    }
}
