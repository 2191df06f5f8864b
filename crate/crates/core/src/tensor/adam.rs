use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamSet, Result, Tensor, TensorError};

/// Per-group learning rates plus the usual Adam constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_embedding: f64,
    pub lr_update: f64,
    pub lr_dynamics: f64,
    pub lr_decoder: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_embedding: 1e-3,
            lr_update: 1e-3,
            lr_dynamics: 1e-3,
            lr_decoder: 1e-3,
            lr_head: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn uniform(lr: f64) -> Self {
        Self {
            lr_embedding: lr,
            lr_update: lr,
            lr_dynamics: lr,
            lr_decoder: lr,
            lr_head: lr,
            ..Self::default()
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Embedding => self.lr_embedding,
            ParamGroup::Update => self.lr_update,
            ParamGroup::Dynamics => self.lr_dynamics,
            ParamGroup::Decoder => self.lr_decoder,
            ParamGroup::Head => self.lr_head,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lr_embedding: self.lr_embedding * k,
            lr_update: self.lr_update * k,
            lr_dynamics: self.lr_dynamics * k,
            lr_decoder: self.lr_decoder * k,
            lr_head: self.lr_head * k,
            ..*self
        }
    }
}

/// Bias-corrected Adam with zero-initialised moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with the i-th entry of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        for (e, g) in params.entries().iter().zip(grads) {
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {}", e.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = c.lr(params.entries()[i].group);
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
