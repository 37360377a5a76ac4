//! Segmentation objectives on class-probability maps: weighted soft dice,
//! per-class binary cross-entropy and their convex combination.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Float;

pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.6;

/// `1/K` for every class.
pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// `1 - sum_k 2 w_k sum(p g) / (sum(p^2) + sum(g^2) + eps)` over all pixels of
/// the batch; `p` is `B x K x H x W` probabilities.
pub fn dice_loss<T: Float>(g: &mut Graph<T>, p: Var, labels: &LabelMap, weights: &[f64]) -> Result<Var> {
    g.dice_loss(p, labels, weights, DICE_EPS)
}

/// Binary cross-entropy of each class channel against its one-hot target,
/// averaged over pixels and classes.
pub fn ce_loss<T: Float>(g: &mut Graph<T>, p: Var, labels: &LabelMap) -> Result<Var> {
    g.ce_loss(p, labels)
}

/// `lambda * dice + (1 - lambda) * ce` with uniform class weights.
pub fn hybrid_loss<T: Float>(g: &mut Graph<T>, p: Var, labels: &LabelMap, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("hybrid loss weight {lambda} outside [0, 1]")));
    }
    let k = g.shape(p).get(1).copied().unwrap_or(0);
    let dice = dice_loss(g, p, labels, &uniform_weights(k.max(1)))?;
    let ce = ce_loss(g, p, labels)?;
    let a = g.mul_const(dice, T::c(lambda));
    let b = g.mul_const(ce, T::c(1.0 - lambda));
    g.add(a, b)
}

/// Softmax over classes followed by [`hybrid_loss`].
pub fn hybrid_loss_from_logits<T: Float>(g: &mut Graph<T>, logits: Var, labels: &LabelMap, lambda: f64) -> Result<Var> {
    let p = g.softmax(logits, 1)?;
    hybrid_loss(g, p, labels, lambda)
}
