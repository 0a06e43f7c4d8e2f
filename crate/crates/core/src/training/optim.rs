//! Adam with bias correction and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<S: Scalar>(store: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Frozen parameters are skipped; a non-finite gradient aborts before
    /// any parameter is modified.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract("optimizer built for a different parameter set"));
        }
        for (_, p) in store.iter() {
            if p.frozen {
                continue;
            }
            if let Some(g) = p.value.grad() {
                if g.iter().any(|x| !x.to_f64_lossy().is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.value.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64_lossy();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *x = S::of(x.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    /// Number of annealing cycles; each restart jumps back to `lr_max`.
    pub cycles: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            lr_max: 2e-4,
            lr_min: 2e-6,
            total_steps: 1000,
            cycles: 1,
        }
    }
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps || self.total_steps == 0 {
            return self.lr_min;
        }
        let period = (self.total_steps as f64 / self.cycles.max(1) as f64).max(1.0);
        let pos = (step as f64 % period) / period;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * pos).cos())
    }
}
