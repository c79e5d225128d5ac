use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates, one moment pair per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Ok(Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        })
    }

    pub fn from_parts(config: AdamConfig, m: Vec<Tensor>, v: Vec<Tensor>, steps: u64) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("first and second moments disagree in shape"));
        }
        Ok(Adam { config, m, v, steps })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` counts as a
    /// zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.steps.min(i32::MAX as u64) as i32);
        for (((p, m), v), g) in params.values_mut().iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            match g {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
                    }
                    Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|m| beta1 * m);
                    v.mapv_inplace(|v| beta2 * v);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}
