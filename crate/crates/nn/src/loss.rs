use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pixel-wise binary cross-entropy on logits, averaged over all pixels.
    #[default]
    Bce,
    /// `1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)` over the whole batch.
    SoftDice,
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_and_grad<T: Scalar>(kind: LossKind, logits: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if !logits.same_dims(target) {
        return Err(NnError::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let m = logits.data.len() as f64;
    let mut grad = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let value = match kind {
        LossKind::Bce => {
            let mut total = 0.0;
            for ((g, &z), &y) in grad.data.iter_mut().zip(&logits.data).zip(&target.data) {
                let (z, y) = (z.as_f64(), y.as_f64());
                total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                *g = T::from_f64((sigmoid(z) - y) / m);
            }
            total / m
        }
        LossKind::SoftDice => {
            let p: Vec<f64> = logits.data.iter().map(|z| sigmoid(z.as_f64())).collect();
            let (mut inter, mut sum) = (0.0, 0.0);
            for (&pi, y) in p.iter().zip(&target.data) {
                inter += pi * y.as_f64();
                sum += pi + y.as_f64();
            }
            let (num, den) = (2.0 * inter + 1.0, sum + 1.0);
            for ((g, &pi), y) in grad.data.iter_mut().zip(&p).zip(&target.data) {
                let dp = -(2.0 * y.as_f64() * den - num) / (den * den);
                *g = T::from_f64(dp * pi * (1.0 - pi));
            }
            1.0 - num / den
        }
    };
    Ok((value, grad))
}
