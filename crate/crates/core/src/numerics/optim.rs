use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{lit, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_wd() -> f64 {
    0.05
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: default_wd(),
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Parameter(format!("invalid optimizer settings {self:?}")));
        }
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Parameter(format!(
                "betas must lie in [0,1), got {:?}",
                self.betas
            )));
        }
        Ok(())
    }
}

/// What [`OptimizerState::step`] does with a trainable parameter that has no gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingGrad {
    Error,
    /// Leave the parameter and its moments untouched.
    Skip,
}

/// AdamW moments and hyperparameters. Weight decay is decoupled and only
/// applied to tensors of rank ≥ 2 (matrices and embeddings tables).
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub on_missing_grad: MissingGrad,
    steps: Vec<u64>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            on_missing_grad: MissingGrad::Error,
            steps: vec![0; store.len()],
            first: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
            second: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
        })
    }

    pub fn with_missing_grad(mut self, policy: MissingGrad) -> Self {
        self.on_missing_grad = policy;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one AdamW update using the gradients held in `store`.
    /// Gradients are left in place; call [`ParamStore::zero_grad`] separately.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if self.on_missing_grad == MissingGrad::Error {
            for (id, name, t) in store.iter() {
                if t.requires_grad() && t.grad().is_none() {
                    return Err(Error::Usage(format!(
                        "parameter `{name}` (#{}) has no gradient",
                        id.index()
                    )));
                }
            }
        }
        let (b1, b2) = self.config.betas;
        let lr: T = lit(self.config.lr);
        let eps: T = lit(self.config.eps);
        let wd: T = lit(self.config.weight_decay);
        let (b1t, b2t): (T, T) = (lit(b1), lit(b2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let t = store.tensor_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            self.steps[i] += 1;
            let step = self.steps[i] as i32;
            let bc1: T = lit(1.0 - b1.powi(step));
            let bc2: T = lit(1.0 - b2.powi(step));
            let decay = t.shape().len() >= 2;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1t * m[j] + (T::one() - b1t) * g;
                v[j] = b2t * v[j] + (T::one() - b2t) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if decay {
                    *p -= lr * wd * *p;
                }
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments_match(&self, store: &ParamStore<T>) -> bool {
        store
            .iter()
            .all(|(id, _, t)| self.first[id.index()].len() == t.len() && self.second[id.index()].len() == t.len())
    }
}
