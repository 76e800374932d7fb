//! AdamW with bias correction and layer-wise learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ParamStore};
use crate::error::{Error, Result};

fn default_lr() -> f64 {
    1e-3
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
fn default_wd() -> f64 {
    0.05
}
fn default_layer_decay() -> f64 {
    0.75
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Per-layer lr factor; 1 disables layer-wise decay.
    #[serde(default = "default_layer_decay")]
    pub layer_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            layer_decay: default_layer_decay(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.layer_decay > 0.0
            && self.layer_decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moments and step counter. Layer `top` (the head) runs at the base lr;
/// layer `l` gets `layer_decay^(top - l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub top_layer: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_mult: Vec<f64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let top_layer = store.entries().iter().map(|e| e.layer).max().unwrap_or(0);
        let lr_mult = store
            .entries()
            .iter()
            .map(|e| layer_multiplier(config.layer_decay, top_layer, e.layer))
            .collect();
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            top_layer,
            m: zeros.clone(),
            v: zeros,
            lr_mult,
        })
    }

    pub fn lr_multiplier(&self, id: usize) -> f64 {
        self.lr_mult[id]
    }

    /// One update. Parameters absent from `grads` are left untouched,
    /// including weight decay. Decay only applies to matrices (rank >= 2).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {i} is {}",
                    store.entry(id).name,
                    g.data()[i]
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let lr = c.lr * self.lr_mult[id];
            let decay = if store.get(id).rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let theta = store.get_mut(id).data_mut();
            for (((th, gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *th *= 1.0 - lr * decay;
                *th -= lr * update;
            }
        }
        Ok(())
    }
}

pub fn layer_multiplier(layer_decay: f64, top_layer: usize, layer: usize) -> f64 {
    layer_decay.powi(top_layer.saturating_sub(layer) as i32)
}
