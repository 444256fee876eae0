use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        let zeros = || params.blocks().iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, params: &ParamSet<f32>) -> Result<Self> {
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.tensor.numel()).collect();
        let ok = |x: &Vec<Vec<f32>>| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !ok(&m) || !ok(&v) {
            return Err(Error::CorruptCheckpoint("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { config, step, m, v })
    }

    /// Applies one update given one gradient tensor per parameter block.
    pub fn update<T: Float>(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.blocks().len() {
            return Err(Error::Shape(format!("{} gradients for {} parameter blocks", grads.len(), self.m.len())));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let t = self.step as i32;
        let corr1 = 1.0 - c.beta1.powi(t);
        let corr2 = 1.0 - c.beta2.powi(t);
        let step_size = (c.lr * corr2.sqrt() / corr1) as f32;
        let eps = (c.eps * corr2.sqrt()) as f32;
        for (((block, g), m), v) in params.blocks_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != block.tensor.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    block.name,
                    block.tensor.shape()
                )));
            }
            for (((p, gi), mi), vi) in block.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64() as f32;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= step_size * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
