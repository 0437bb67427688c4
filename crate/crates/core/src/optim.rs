//! Adam with decoupled weight decay over one or more parameter sets.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: every step shrinks weights by `lr·weight_decay`
    /// before the moment update.
    pub weight_decay: f64,
    /// Rescale the joint gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// Adam state for a fixed list of parameter sets (groups).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<Tensor>>,
    second: Vec<Vec<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: &[&ParamSet]) -> Self {
        let zeros = |ps: &&ParamSet| ps.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: groups.iter().map(zeros).collect(),
            second: groups.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `(step, first moments, second moments)` for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<Tensor>], &[Vec<Tensor>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<Tensor>>, second: Vec<Vec<Tensor>>) -> Result<()> {
        let same = |a: &[Vec<Tensor>], b: &[Vec<Tensor>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.shape() == q.shape())
                })
        };
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::Validation("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update of every group with its gradients, all at rate `lr`.
    pub fn step(&mut self, groups: &mut [&mut ParamSet], grads: &[Vec<Tensor>], lr: f64) -> Result<()> {
        if groups.len() != self.first.len() || grads.len() != groups.len() {
            return Err(Error::shape(
                "adam",
                format!("{} groups, {} gradient lists, {} states", groups.len(), grads.len(), self.first.len()),
            ));
        }
        for (gi, (ps, gs)) in groups.iter().zip(grads).enumerate() {
            if ps.len() != gs.len() || ps.len() != self.first[gi].len() {
                return Err(Error::shape("adam", format!("group {gi}: {} params, {} grads", ps.len(), gs.len())));
            }
            for (p, gr) in ps.values().iter().zip(gs) {
                if p.shape() != gr.shape() {
                    return Err(Error::shape("adam", format!("{:?} vs {:?}", p.shape(), gr.shape())));
                }
                if !gr.all_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
            }
        }
        let scale = match self.config.grad_clip {
            Some(max) => {
                let sq: f64 = grads.iter().flatten().flat_map(|t| t.data()).map(|g| g * g).sum();
                let norm = Float::sqrt(sq);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - Float::powi(beta1, t);
        let c2 = 1.0 - Float::powi(beta2, t);
        for (gi, ps) in groups.iter_mut().enumerate() {
            for (pi, param) in ps.values_mut().iter_mut().enumerate() {
                let g = grads[gi][pi].data();
                let m = self.first[gi][pi].data_mut();
                let v = self.second[gi][pi].data_mut();
                for (j, w) in param.data_mut().iter_mut().enumerate() {
                    *w -= lr * weight_decay * *w;
                    let gj = g[j] * scale;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    *w -= lr * mh / (Float::sqrt(vh) + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::full(&[1], v));
        ps
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut ps = single(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&ps]);
        opt.step(&mut [&mut ps], &[vec![Tensor::full(&[1], 0.37)]], 0.01).unwrap();
        assert!((ps.values()[0].item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_gradient() {
        let mut ps = single(2.0);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &[&ps]);
        opt.step(&mut [&mut ps], &[vec![Tensor::zeros(&[1])]], 0.1).unwrap();
        assert!((ps.values()[0].item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = single(3.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&ps]);
        for _ in 0..2000 {
            let w = ps.values()[0].item();
            opt.step(&mut [&mut ps], &[vec![Tensor::full(&[1], 2.0 * (w - 0.5))]], 0.01)
                .unwrap();
        }
        assert!((ps.values()[0].item() - 0.5).abs() < 1e-3);
        assert_eq!(opt.steps_taken(), 2000);
    }

    #[test]
    fn clipping_bounds_the_gradient_norm() {
        let mut a = single(0.0);
        let cfg = AdamConfig {
            grad_clip: Some(1.0),
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &[&a]);
        opt.step(&mut [&mut a], &[vec![Tensor::full(&[1], 100.0)]], 1.0).unwrap();
        let (_, m, _) = opt.state();
        assert!((m[0][0].item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_or_non_finite_gradients() {
        let mut ps = single(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&ps]);
        assert!(opt.step(&mut [&mut ps], &[vec![Tensor::zeros(&[2])]], 0.1).is_err());
        assert!(opt
            .step(&mut [&mut ps], &[vec![Tensor::full(&[1], f64::NAN)]], 0.1)
            .is_err());
        assert_eq!(opt.steps_taken(), 0);
    }
}
