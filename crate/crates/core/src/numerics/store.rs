use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    first_moment: Tensor<F>,
    second_moment: Tensor<F>,
}

/// Named trainable tensors with their gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: usize) -> &Tensor<F> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.params[id].value
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Adds `grads[i]` (when present) into parameter `i`'s accumulator.
    pub fn accumulate(&mut self, grads: &[Option<Tensor<F>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn grads(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    /// One bias-corrected Adam update at step `t` (1-based).
    pub fn adam_step(&mut self, cfg: &AdamConfig, t: u64) -> Result<()> {
        if t < 1 {
            return Err(Error::Config("adam step index must be >= 1".into()));
        }
        let lr = F::lit(cfg.lr);
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let eps = F::lit(cfg.eps);
        let c1 = F::one() - F::lit(cfg.beta1.powf(t as f64));
        let c2 = F::one() - F::lit(cfg.beta2.powf(t as f64));
        for p in &mut self.params {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..w.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Same names and values at another precision; moments and gradients reset.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast()).expect("names are unique");
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
