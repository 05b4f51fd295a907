use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with moments keyed by parameter name.
///
/// Moments exist only for blocks that have received a gradient, so frozen
/// blocks never acquire optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    /// Rebuilds optimizer state from serialized parts.
    pub fn restore(cfg: AdamConfig, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) -> Self {
        Self { cfg, step, moments }
    }

    /// Applies one update. A gradient addressed to a frozen block is a
    /// contract error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in grads.param_ids() {
            let name = store.name(id).to_string();
            if store.is_frozen(id) {
                return Err(Error::contract(format!("gradient written to frozen block `{name}`")));
            }
            let g = grads.param(id).expect("listed id has a gradient");
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step: self.step as usize,
                    detail: format!("non-finite gradient in `{name}`"),
                });
            }
            let shape = g.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let p = store.value_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn zero_gradient_on_fresh_optimizer_is_a_no_op() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.clone();
        let mut grads = Gradients::default();
        grads.set_param(id, Tensor::zeros([3]));
        Adam::new(AdamConfig::default()).step(&mut s, &grads).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn frozen_block_rejects_gradient_and_holds_no_moments() {
        let mut s = ParamStore::new();
        let a = s.insert("backbone.w", Tensor::ones([2])).unwrap();
        let b = s.insert("head.w", Tensor::ones([2])).unwrap();
        s.set_frozen_prefix("backbone.", true);
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = Graph::new();
        let (av, bv) = (g.param(&s, a), g.param(&s, b));
        let sum = g.add(av, bv).unwrap();
        let l = g.sum_all(sum);
        let grads = g.backward(l).unwrap();
        opt.step(&mut s, &grads).unwrap();
        assert!(!opt.has_moments("backbone.w"));
        assert!(opt.has_moments("head.w"));
        let mut forged = Gradients::default();
        forged.set_param(a, Tensor::ones([2]));
        assert!(opt.step(&mut s, &forged).is_err());
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros([2])).unwrap();
        let mut grads = Gradients::default();
        grads.set_param(id, Tensor::new([2], vec![3.0, -0.2]).unwrap());
        Adam::new(AdamConfig::default()).step(&mut s, &grads).unwrap();
        let w = s.value(id).data();
        assert!((w[0] + 1e-3).abs() < 1e-7 && (w[1] - 1e-3).abs() < 1e-7, "{w:?}");
    }
}
