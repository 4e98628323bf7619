use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{AdamConfig, SgdConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// Cosine decay from `max` at step 0 to `min` at `total`.
pub fn cosine_lr(max: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return max;
    }
    let t = (step as f64 / total as f64).min(1.0);
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `base * (1 - step/total)^power`.
pub fn poly_lr(base: f64, power: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - (step as f64 / total as f64).min(1.0)).powf(power)
}

fn grad_with_decay(store: &ParamStore, id: ParamId, weight_decay: f64) -> Result<Vec<f64>> {
    let t = store.get(id);
    let g = t
        .grad()
        .ok_or_else(|| Error::invalid("optimizer", format!("{} has no gradient", store.name(id))))?;
    Ok(g.iter().zip(t.data()).map(|(g, p)| g + weight_decay * p).collect())
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn from_config(c: &SgdConfig) -> Self {
        Self::new(c.momentum, c.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            let g = grad_with_decay(store, id, self.weight_decay)?;
            let buf = self.buffers.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
            for (b, g) in buf.iter_mut().zip(&g) {
                *b = self.momentum * *b + g;
            }
            for (p, b) in store.get_mut(id).data_mut().iter_mut().zip(buf.iter()) {
                *p -= lr * b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction; every parameter counts its own steps, so a
/// parameter held back for a while starts fresh when it is first updated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub eps: f64,
    pub slots: BTreeMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
        } = self.config;
        for &id in ids {
            let g = grad_with_decay(store, id, weight_decay)?;
            let slot = self.slots.entry(id.0).or_insert_with(|| AdamSlot {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            slot.step += 1;
            let c1 = 1.0 - beta1.powi(slot.step as i32);
            let c2 = 1.0 - beta2.powi(slot.step as i32);
            let data = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Tensor4};

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", ParamGroup::Weight, Tensor4::vector(&[value])).unwrap();
        s.get_mut(id).set_grad(vec![grad]).unwrap();
        (s, id)
    }

    #[test]
    fn schedules_hit_their_endpoints() {
        assert_eq!(cosine_lr(0.025, 0.001, 0, 10), 0.025);
        assert!((cosine_lr(0.025, 0.001, 10, 10) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(0.025, 0.001, 5, 10) - 0.013).abs() < 1e-12);
        assert_eq!(poly_lr(0.01, 0.9, 0, 100), 0.01);
        assert_eq!(poly_lr(0.01, 0.9, 100, 100), 0.0);
        assert!((poly_lr(0.01, 0.9, 50, 100) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut s, id) = store_with(1.0, 0.5);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &[id], 0.1).unwrap();
        assert!((s.get(id).data()[0] - 0.95).abs() < 1e-15);
        opt.step(&mut s, &[id], 0.1).unwrap();
        // buffer = 0.9 * 0.5 + 0.5
        assert!((s.get(id).data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = store_with(0.0, 3.0);
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut s, &[id]).unwrap();
        // Bias-corrected first step is lr * g / |g|.
        assert!((s.get(id).data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        let id = s.register("p", ParamGroup::Weight, Tensor4::vector(&[0.0])).unwrap();
        assert!(Sgd::new(0.9, 0.0).step(&mut s, &[id], 0.1).is_err());
    }
}
