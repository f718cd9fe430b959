//! Fused loss primitives. Both return the *sum* over selected elements;
//! callers pick the normalizer.

use super::graph::Op;
use super::ops::sigmoid_scalar;
use super::{Array, Float, Tensor, TensorError};

const PROB_CLAMP: f64 = 1e-7;

/// Focal-loss weighting. `alpha = None` means no class weighting (alpha_t = 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl FocalParams {
    pub fn new(alpha: Option<f64>, gamma: f64) -> Self {
        Self { alpha, gamma }
    }

    fn alpha_t(&self, positive: bool) -> f64 {
        match (self.alpha, positive) {
            (None, _) => 1.0,
            (Some(a), true) => a,
            (Some(a), false) => 1.0 - a,
        }
    }
}

/// Per-element focal loss `-alpha_t (1 - p_t)^gamma ln p_t` for a logit and a
/// binary target.
pub fn focal_term(logit: f64, positive: bool, params: FocalParams) -> f64 {
    let p = sigmoid_scalar(logit);
    let pt = if positive { p } else { 1.0 - p };
    let pt = pt.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -params.alpha_t(positive) * (1.0 - pt).powf(params.gamma) * pt.ln()
}

struct FocalOp<T: Float> {
    x: Tensor<T>,
    targets: Vec<u8>,
    mask: Option<Vec<bool>>,
    params: FocalParams,
}

impl<T: Float> Op<T> for FocalOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, g: &[T]) {
        let upstream = g[0];
        let gamma = T::lit(self.params.gamma);
        let lo = T::lit(PROB_CLAMP);
        let xv = self.x.data().to_vec();
        self.x.accumulate(|acc| {
            for (i, a) in acc.iter_mut().enumerate() {
                if self.mask.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                let pos = self.targets[i] != 0;
                let at = T::lit(self.params.alpha_t(pos));
                // Derivative in terms of q = sigma(+-x), the probability of the
                // true label; d q / d x = +-q (1 - q).
                let z = if pos { xv[i] } else { -xv[i] };
                let q = sigmoid_scalar(z);
                let one_m = T::one() - q;
                let d = at * one_m.powf(gamma) * (gamma * q * q.max(lo).ln() - one_m);
                let d = if pos { d } else { -d };
                *a = *a + upstream * d;
            }
        });
    }
}

/// Sum of focal terms over all non-masked elements of `logits`.
///
/// `targets` holds 0/1 per element. `mask[i] == false` excludes element `i`
/// (ignored anchors).
pub fn focal_loss<T: Float>(
    logits: &Tensor<T>,
    targets: &[u8],
    mask: Option<&[bool]>,
    params: FocalParams,
) -> Result<Tensor<T>, TensorError> {
    let n = logits.numel();
    if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(TensorError::ShapeMismatch {
            op: "focal_loss",
            detail: format!("{n} logits, {} targets", targets.len()),
        });
    }
    let total: f64 = logits
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(i, &x)| focal_term(x.as_f64(), targets[i] != 0, params))
        .sum();
    Ok(Tensor::from_op(
        Array::scalar(T::lit(total)),
        FocalOp {
            x: logits.clone(),
            targets: targets.to_vec(),
            mask: mask.map(|m| m.to_vec()),
            params,
        },
    ))
}

struct SmoothL1Op<T: Float> {
    x: Tensor<T>,
    target: Vec<T>,
    weights: Vec<T>,
    beta: T,
}

impl<T: Float> Op<T> for SmoothL1Op<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let up = g[0];
        let xv = self.x.data().to_vec();
        self.x.accumulate(|acc| {
            for (i, a) in acc.iter_mut().enumerate() {
                let w = self.weights[i];
                if w == T::zero() {
                    continue;
                }
                let d = xv[i] - self.target[i];
                let gd = if d.abs() < self.beta { d / self.beta } else { d.signum() };
                *a = *a + up * w * gd;
            }
        });
    }
}

/// Weighted sum of smooth-L1 terms: `0.5 d^2 / beta` for `|d| < beta`,
/// `|d| - beta / 2` otherwise.
pub fn smooth_l1<T: Float>(
    pred: &Tensor<T>,
    target: &[T],
    weights: &[T],
    beta: f64,
) -> Result<Tensor<T>, TensorError> {
    let n = pred.numel();
    if target.len() != n || weights.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "smooth_l1",
            detail: format!("{n} predictions, {} targets, {} weights", target.len(), weights.len()),
        });
    }
    if !(beta > 0.0) {
        return Err(TensorError::InvalidArgument(format!("smooth_l1 beta {beta} must be positive")));
    }
    let b = T::lit(beta);
    let half = T::lit(0.5);
    let total = pred
        .data()
        .iter()
        .zip(target)
        .zip(weights)
        .filter(|(_, &w)| w != T::zero())
        .map(|((&p, &t), &w)| {
            let d = (p - t).abs();
            w * if d < b { half * d * d / b } else { d - half * b }
        })
        .sum();
    Ok(Tensor::from_op(
        Array::scalar(total),
        SmoothL1Op {
            x: pred.clone(),
            target: target.to_vec(),
            weights: weights.to_vec(),
            beta: b,
        },
    ))
}
