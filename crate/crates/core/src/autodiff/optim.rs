//! AdamW, cosine annealing and global-norm clipping.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<ParamId, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: store.get(*id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", store.name(*id)),
                    index: i,
                });
            }
        }
        self.step = self
            .step
            .checked_add(1)
            .ok_or_else(|| Error::contract("optimizer step counter overflow"))?;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let decay = S::of(1.0 - lr * c.weight_decay);
        let step_size = S::of(lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(c.eps);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let n = g.len();
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
            });
            if mom.m.len() != n {
                *mom = Moments {
                    m: vec![S::zero(); n],
                    v: vec![S::zero(); n],
                };
            }
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                mom.m[i] = b1 * mom.m[i] + (S::one() - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (S::one() - b2) * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * mom.m[i] / ((mom.v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base_lr · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine schedule with zero total steps"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule of {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Rescales all gradients when their global L2 norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [(ParamId, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
