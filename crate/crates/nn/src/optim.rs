//! SGD with Nesterov momentum.
//!
//! For every trainable tensor with velocity `v`, gradient `g`, learning rate
//! `lr` and momentum `mu`:
//!
//! ```text
//! v' = mu * v - lr * g
//! p' = p + mu * v' - lr * g
//! ```
//!
//! With `mu = 0` this is plain gradient descent. Frozen tensors and buffers
//! are never touched.

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct NesterovSgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(NesterovSgd {
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update. Fails without modifying anything when a trainable
    /// gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NnError::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
            return Err(NnError::invalid(format!("non-finite gradient in {}", p.name)));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.grad.len()]).collect();
        }
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, vel), &g) in p.value.iter_mut().zip(v.iter_mut()).zip(&p.grad) {
                *vel = mu * *vel - lr * g;
                *w = *w + mu * *vel - lr * g;
            }
        }
        Ok(())
    }
}
