//! Adam with L2 weight decay folded into the gradient, and the learning-rate schedule.

use std::collections::BTreeMap;

use crate::network::{Gradients, ParamStore};
use crate::tensor::Tensor;

use super::config::{Stage, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            state: AdamState::default(),
        }
    }

    /// Drops the moments of one parameter, e.g. after the classifier is rebuilt.
    pub fn reset_param(&mut self, name: &str) {
        self.state.m.remove(name);
        self.state.v.remove(name);
    }

    /// One update of every parameter that has a gradient. Parameters without a gradient
    /// are left untouched, decay included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params.param_mut(name);
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi + self.weight_decay * pd[i];
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Learning rate for a 0-based epoch. Pre-training warms up linearly from `base / 10`
/// and then decays by `lr_gamma` at each milestone; fine-tuning is constant.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.stage == Stage::Finetune {
        return cfg.base_lr;
    }
    if epoch < cfg.warmup_epochs {
        let frac = epoch as f64 / cfg.warmup_epochs as f64;
        return cfg.base_lr * (0.1 + 0.9 * frac);
    }
    let passed = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.base_lr * cfg.lr_gamma.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_milestones() {
        let cfg = TrainConfig::full(Stage::Pretrain);
        assert!((learning_rate(&cfg, 0) - 3.5e-5).abs() < 1e-15);
        assert!((learning_rate(&cfg, 5) - 3.5e-4 * 0.55).abs() < 1e-15);
        assert!((learning_rate(&cfg, 10) - 3.5e-4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 39) - 3.5e-4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 40) - 3.5e-5).abs() < 1e-15);
        assert!((learning_rate(&cfg, 69) - 3.5e-5).abs() < 1e-15);
        assert!((learning_rate(&cfg, 70) - 3.5e-6).abs() < 1e-15);
        let ft = TrainConfig::full(Stage::Finetune);
        assert_eq!(learning_rate(&ft, 0), 3.5e-4);
        assert_eq!(learning_rate(&ft, 79), 3.5e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.set_param("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::from_vec(&[2], vec![0.5, -2.0]));
        let mut adam = Adam::new(0.0);
        adam.step(&mut p, &g, 0.1);
        let w = p.param("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = ParamStore::new();
        p.set_param("w", Tensor::from_vec(&[1], vec![2.0]));
        p.set_param("frozen", Tensor::from_vec(&[1], vec![2.0]));
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[1]));
        let mut adam = Adam::new(0.1);
        for _ in 0..10 {
            adam.step(&mut p, &g, 0.01);
        }
        assert!(p.param("w").data()[0] < 2.0);
        assert_eq!(p.param("frozen").data()[0], 2.0);
    }
}
