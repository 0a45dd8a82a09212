use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter in `store` from its accumulated
    /// gradient (absent gradients count as zero). Non-finite gradients abort
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NanGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let grad = p.grad.as_ref().map(Tensor::data);
            let w = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = (m[i] / c1) / (math::sqrt(v[i] / c2) + eps);
                w[i] -= lr * weight_decay * w[i] + lr * update;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, constant afterwards.
pub fn lr_at(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return base;
    }
    let frac = (step + 1) as f64 / warmup as f64;
    base * frac.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_store(w: f64, g: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.push("w", Tensor::scalar(w), true);
        s.get_mut(id).grad = g.map(Tensor::scalar);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(1.5, Some(0.0));
        AdamW::new(AdamWConfig::default()).step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item(), 1.5);
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = scalar_store(0.0, Some(1.0));
        AdamW::new(AdamWConfig::default()).step(&mut s, 0.1).unwrap();
        let w = s.iter().next().unwrap().1.value.item();
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar_store(1.0, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.iter().next().unwrap().1.value.item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_weights() {
        let mut s = ParamStore::new();
        let a = s.push("fine", Tensor::scalar(1.0), true);
        let b = s.push("broken", Tensor::vector(vec![1.0, 2.0]), true);
        s.get_mut(a).grad = Some(Tensor::scalar(1.0));
        s.get_mut(b).grad = Some(Tensor::vector(vec![0.0, f64::NAN]));
        let mut opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.step(&mut s, 0.1), Err(Error::NanGradient("broken".into())));
        assert_eq!(s.get(a).value.item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = ParamStore::new();
        let id = s.push("w", Tensor::scalar(2.0), false);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(id).value.item(), 2.0);
    }

    #[test]
    fn schedule() {
        assert!((lr_at(4, 2e-4, 10) - 1e-4).abs() < 1e-18);
        assert!((lr_at(0, 2e-4, 10) - 2e-5).abs() < 1e-18);
        assert_eq!(lr_at(9, 2e-4, 10), 2e-4);
        assert_eq!(lr_at(500, 2e-4, 10), 2e-4);
        assert_eq!(lr_at(0, 1.0, 0), 1.0);
        let mut prev = 0.0;
        for s in 0..30 {
            let lr = lr_at(s, 2e-4, 10);
            assert!(lr >= prev);
            prev = lr;
        }
    }
}
