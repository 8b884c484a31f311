//! AdamW with decoupled weight decay.

use crate::error::{arg, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Learning-rate schedule over a known number of steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// `lr · (1 − t / total)` at zero-based step `t`.
    Linear,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown schedule {other:?}")),
        }
    }
}

impl Schedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Linear if total == 0 => 1.0,
            Self::Linear => 1.0 - step.min(total) as f64 / total as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        let ok = cfg.lr >= 0.0
            && (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0
            && cfg.weight_decay >= 0.0;
        if !ok {
            return arg(format!("invalid AdamW settings {cfg:?}"));
        }
        Ok(Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters missing from `grads` are treated as
    /// having zero gradient (they still decay).
    ///
    /// Order: `θ ← θ·(1 − lr·wd)`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_scaled(params, grads, 1.0)
    }

    /// As [`AdamW::step`] with the learning rate multiplied by `lr_factor`.
    pub fn step_scaled(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_factor: f64,
    ) -> Result<()> {
        self.step += 1;
        let c = AdamWConfig {
            lr: self.cfg.lr * lr_factor,
            ..self.cfg.clone()
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (name, theta) in params.iter_mut() {
            let n = theta.len();
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != n {
                    return arg(format!("gradient for {name} has {} entries, parameter {n}", g.len()));
                }
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let t = &mut theta.data_mut()[i];
                *t *= decay;
                *t -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
