use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip. Off unless set.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.03, momentum: 0.9, weight_decay: 1e-4, clip_grad_norm: None }
    }
}

impl SgdConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |m: &str| Error::ConfigParse { field: field.to_string(), message: m.to_string() };
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(bad("lr must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(bad("weight_decay must be non-negative"));
        }
        if matches!(self.clip_grad_norm, Some(c) if c <= 0.0) {
            return Err(bad("clip_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Which way the optimizer moves along the loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    /// Maximize the loss: descend on its negation.
    Ascent,
}

/// SGD with heavy-ball momentum and coupled weight decay.
///
/// `d = ±g + wd·p; buf = μ·buf + d (buf = d on the first step); p -= lr·buf`
pub struct Sgd {
    config: SgdConfig,
    lr: f64,
    params: Vec<(String, Var)>,
    momentum: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, config: SgdConfig) -> Self {
        Self { lr: config.lr, config, params, momentum: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update and returns the (pre-clip) gradient norm over the
    /// parameters this optimizer owns.
    pub fn step(&mut self, grads: &GradStore, direction: Direction) -> Result<f64> {
        let sign = match direction {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        };
        let mut sq = 0.0f64;
        let mut owned = Vec::with_capacity(self.params.len());
        for (name, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                owned.push((name.clone(), var.clone(), g.detach()));
            }
        }
        let norm = sq.sqrt();
        let clip = match self.config.clip_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-12),
            _ => 1.0,
        };
        for (name, var, g) in owned {
            let p = var.as_tensor().detach();
            let mut d = (g * (sign * clip))?;
            if self.config.weight_decay != 0.0 {
                d = (d + (&p * self.config.weight_decay)?)?;
            }
            let buf = match self.momentum.get(&name) {
                Some(prev) if self.config.momentum != 0.0 => ((prev * self.config.momentum)? + d)?,
                _ => d,
            };
            var.set(&(&p - (&buf * self.lr)?)?)?;
            if self.config.momentum != 0.0 {
                self.momentum.insert(name, buf);
            }
        }
        Ok(norm)
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        self.momentum.clone()
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        self.momentum.clear();
        for (name, var) in &self.params {
            if let Some(t) = state.get(name) {
                if t.dims() != var.dims() {
                    return Err(Error::CheckpointMismatch(format!("momentum buffer {name} has shape {:?}", t.dims())));
                }
                self.momentum.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        Ok(())
    }

    pub fn owns(&self, var: &Var) -> bool {
        self.params.iter().any(|(_, v)| v.as_tensor().id() == var.as_tensor().id())
    }
}
