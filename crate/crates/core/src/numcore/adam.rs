use super::graph::ParamGrads;
use super::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated lazily per
/// parameter; parameters without a gradient in a step are left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let id = ParamId(i);
            let Some(grad) = grads.get(id) else { continue };
            if !store.get(id).trainable {
                continue;
            }
            let n = grad.len();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; n]);
            let values = store.tensor_mut(id).data_mut();
            for k in 0..n {
                let g = grad.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                values[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * values[k]);
            }
        }
    }
}
