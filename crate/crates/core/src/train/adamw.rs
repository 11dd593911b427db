//! Decoupled-weight-decay Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Scalar counters stored alongside parameters and moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub step: u64,
    pub epoch: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Parameters with their AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub params: Params<S>,
    pub m: Params<S>,
    pub v: Params<S>,
    pub counters: Counters,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: Params<S>, base_lr: f64, weight_decay: f64, seed: u64) -> Self {
        TrainState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            counters: Counters { step: 0, epoch: 0, base_lr, weight_decay, seed },
        }
    }

    pub fn step(&self) -> u64 {
        self.counters.step
    }

    /// One AdamW update with learning rate `lr`:
    /// `p <- p (1 - lr wd)` then `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn adamw_step(&mut self, grads: &Params<S>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Divergence {
                    context: format!("optimizer step {}", self.counters.step + 1),
                    what: format!("gradient of `{name}`"),
                });
            }
        }
        self.params.check_shapes(grads)?;
        let t = self.counters.step + 1;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
        let decay = S::lit(1.0 - lr * self.counters.weight_decay);
        let (lr_s, eps) = (S::lit(lr), S::lit(EPS));
        let (bc1, bc2) = (S::lit(bc1), S::lit(bc2));
        for (name, p) in self.params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name)?;
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (S::one() - b1) * *gi;
            }
            let v = self.v.get_mut(name)?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (S::one() - b2) * *gi * *gi;
            }
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi *= decay;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        self.counters.step = t;
        Ok(())
    }
}
