use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor;
use crate::error::{invalid, shape_err, Error, Result};
use crate::velnet::NetParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW moments for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &NetParams) -> Self {
        let shapes: Vec<&[usize]> = params.entries().iter().map(|e| e.tensor.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)` with bias-corrected moments.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step_tensors(&mut self, names: &[&str], params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || names.len() != params.len() {
            return invalid(format!(
                "adamw: {} params, {} grads, {} names, {} moment slots",
                params.len(),
                grads.len(),
                names.len(),
                self.m.len()
            ));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return shape_err("adamw gradient", p.shape(), g.shape());
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let c = &self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            }
            let v = self.v[i].data_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let names: Vec<String> = params.entries().iter().map(|e| e.name.clone()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut tensors = params.tensors();
        self.step_tensors(&names, &mut tensors, grads, lr)?;
        for (slot, t) in params.tensors_mut().zip(tensors) {
            *slot = t;
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/total))`; `epoch` may be fractional.
pub fn cosine_lr(epoch: f64, total_epochs: f64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if !(total_epochs > 0.0) || !(0.0..=total_epochs).contains(&epoch) {
        return invalid(format!("cosine_lr: epoch {epoch} outside [0, {total_epochs}]"));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * epoch / total_epochs).cos()))
}
