//! Adam with a linear learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ParamGrads, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Steps of linear warm-up from 0 to `lr`.
    #[serde(default)]
    pub warmup_steps: u64,
    /// The learning rate reaches 0 at this step.
    pub total_steps: u64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, total_steps: u64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_steps: 0,
            total_steps,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate for the update with 0-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = (step - self.warmup_steps) as f64 / span as f64;
        self.lr * (1.0 - done).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads.iter() {
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let p = store.get_mut(*id).data_mut();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.config.eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn linear_decay() {
        let c = AdamConfig::new(1e-4, 100);
        assert_eq!(c.lr_at(0), 1e-4);
        assert!((c.lr_at(50) - 5e-5).abs() < 1e-18);
        assert_eq!(c.lr_at(100), 0.0);
        let mut w = c.clone();
        w.warmup_steps = 10;
        assert!((w.lr_at(4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr·sign(g).
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let g = Graph::new();
        let w = g.param(id, store.get(id));
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1, 10)).unwrap();
        adam.update(&mut store, &grads);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![3.0, -1.5])).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.05, 2000)).unwrap();
        for _ in 0..2000 {
            let g = Graph::new();
            let w = g.param(id, store.get(id));
            let loss = w.mul(&w).unwrap().sum().unwrap();
            let grads = g.backward(loss).unwrap();
            adam.update(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }
}
