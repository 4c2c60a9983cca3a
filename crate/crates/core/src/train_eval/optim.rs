//! Adam with an optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::params::{ParamGrads, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied as `theta -= lr * decay * theta` outside the moment estimates.
    pub decoupled_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_decay: 0.0,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, m)| Matrix::zeros(m.dim())).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &ParamGrads) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            decoupled_decay,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let theta = store.value_mut(id);
            ndarray::Zip::from(theta)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|t, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *t -= lr * (m_hat / (v_hat.sqrt() + eps) + decoupled_decay * *t);
                });
        }
    }
}
