//! Adam with decoupled weight decay.

use crate::error::{arg, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return arg(format!("{} gradients for {} parameters", grads.len(), self.m.len()));
        }
        self.t += 1;
        let c = &self.config;
        let b1 = 1.0 - c.beta1.powi(self.t as i32);
        let b2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        let mut n = 0;
        for (i, p) in params.enumerate() {
            let g = grads[i].data();
            if g.len() != p.numel() {
                return arg(format!("gradient {i} has {} values for {}", g.len(), p.numel()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / b1;
                let vh = v[j] / b2;
                *x = *x * decay - c.lr * mh / (vh.sqrt() + c.eps);
            }
            n += 1;
        }
        if n != self.m.len() {
            return arg(format!("{n} parameters for {} optimizer slots", self.m.len()));
        }
        Ok(())
    }
}
