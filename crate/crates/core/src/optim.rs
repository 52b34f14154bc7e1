//! AdamW with a cosine learning-rate schedule and global-norm clipping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight decay must be ≥ 0 and eps > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// `lr · ½(1 + cos(π·t/T))`, reaching zero at `t = T`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// Global L2 norm over the gradients of trainable parameters.
pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g.as_f64() * g.as_f64())
        .sum();
    libm::sqrt(sq)
}

/// Scales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for (_, _, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: usize,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    /// Optimizer over the parameters of `store` that are currently trainable.
    pub fn new<T: Real>(cfg: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let state = store
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(id, _, t)| (id, Moments { m: vec![0.0; t.len()], v: vec![0.0; t.len()] }))
            .collect();
        Ok(Self { cfg, step: 0, state })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }

    /// The store's trainable set must be exactly the set this optimizer
    /// was built over.
    pub fn check_matches<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        for (id, name, t) in store.iter() {
            if t.requires_grad() != self.state.contains_key(&id) {
                return Err(Error::Partition(format!(
                    "parameter {name} is {} but the optimizer {} it",
                    if t.requires_grad() { "trainable" } else { "frozen" },
                    if t.requires_grad() { "does not track" } else { "tracks" },
                )));
            }
        }
        Ok(())
    }

    /// One decoupled-weight-decay update at learning rate `lr`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.check_matches(store)?;
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (id, _, t) in store.iter_mut() {
            let Some(st) = self.state.get_mut(&id) else { continue };
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            let w = t.data_mut();
            for i in 0..w.len() {
                let gi = g[i].as_f64();
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let wi = w[i].as_f64();
                w[i] = T::cast(wi - lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * wi));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Init, RngState, Tensor};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap().with_requires_grad(true)).unwrap();
        store.get_mut(id).accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { clip_norm: None, ..Default::default() }, &store).unwrap();
        opt.step(&mut store, 0.1).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::zeros(&[2]).unwrap().with_requires_grad(true)).unwrap();
        store.get_mut(id).accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((grad_norm(&store) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_untouched_and_partition_checked() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = RngState::new(1);
        let a = store.init("a", &[3], Init::UniformScaled, &mut rng, true).unwrap();
        let b = store.init("b", &[3], Init::UniformScaled, &mut rng, false).unwrap();
        let before = store.get(b).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        store.get_mut(a).accumulate_grad(&[1.0; 3]).unwrap();
        opt.step(&mut store, 1e-2).unwrap();
        assert_eq!(store.get(b), &before);
        store.set_trainable(|n| n == "b");
        assert!(matches!(opt.step(&mut store, 1e-2), Err(Error::Partition(_))));
    }

    #[test]
    fn rejects_bad_config() {
        let store = ParamStore::<f32>::new();
        assert!(AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &store).is_err());
        assert!(AdamW::new(AdamWConfig { beta2: 1.0, ..Default::default() }, &store).is_err());
    }
}
