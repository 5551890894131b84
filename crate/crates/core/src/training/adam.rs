//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::NetworkModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
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
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moments per parameter group, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &NetworkModel, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `m` then `v`, flattened.
    pub fn moments_flat(&self) -> Vec<f32> {
        let mut out = self.m.concat();
        out.extend(self.v.concat());
        out
    }

    /// Inverse of [`AdamState::moments_flat`]; returns values consumed.
    pub fn load_moments(&mut self, blob: &[f32]) -> Result<usize> {
        let n = self.len();
        if blob.len() < 2 * n {
            return Err(Error::dim(format!("Adam state needs {} values, {} available", 2 * n, blob.len())));
        }
        let mut at = 0;
        for g in self.m.iter_mut().chain(self.v.iter_mut()) {
            let n = g.len();
            g.copy_from_slice(&blob[at..at + n]);
            at += n;
        }
        Ok(at)
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: Vec<&mut [f32]>, grads: &[Vec<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params.iter().zip(grads).zip(&state.m).any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(Error::dim("parameter, gradient and Adam state layouts differ"));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}
