use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base`, then cosine from `base` to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub end: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= self.warmup_steps {
            // no room for a decay phase
            return self.base;
        }
        let p = ((step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64).min(1.0);
        self.end + 0.5 * (self.base - self.end) * (1.0 + (PI * p).cos())
    }
}

/// True for parameters that take weight decay: everything except norm
/// scales and shifts, biases, positional embeddings, the mask token and
/// the temperature.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("pos_embed")
        || name == crate::distillation::MASK_TOKEN
        || name == crate::objectives::LOG_SIGMA)
}

/// Adam with decoupled weight decay. Parameters without a gradient this
/// step are left untouched, decay included.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: ParamStore::new(),
            v: ParamStore::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(p.shape().to_vec()));
                self.v.insert(name, Tensor::zeros(p.shape().to_vec()));
            }
            let m = self.m.get_mut(name).expect("inserted above").data_mut();
            let v = self.v.get_mut(name).expect("inserted above").data_mut();
            let shrink = if decays(name) { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * shrink - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max: Option<f64>) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max {
        if norm > max {
            let s = max / norm;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}
