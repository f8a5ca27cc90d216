//! Mean squared error and softmax cross-entropy.
//!
//! Both reduce over the batch by the mean. Rank-1 inputs are a single sample,
//! rank-2 inputs are `[batch, outputs]`.

use crate::error::{Error, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

fn batch_layout(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [k] => Ok((1, k)),
        [n, k] => Ok((n, k)),
        _ => Err(Error::Contract(format!(
            "loss expects rank-1 or rank-2 predictions, got {:?}",
            t.shape()
        ))),
    }
}

/// Per-sample squared error `Σ_j (d_j - y_j)²`; writes `∂/∂y` into `grad`.
pub fn mse_sample(pred: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    for ((g, y), d) in grad.iter_mut().zip(pred).zip(target) {
        let r = d - y;
        loss += r * r;
        *g = -2.0 * r;
    }
    loss
}

/// Per-sample `-log softmax(logits)[label]`; writes `softmax - one_hot` into `grad`.
pub fn cross_entropy_sample(logits: &[f64], label: usize, grad: &mut [f64]) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            bound: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[label] -= 1.0;
    Ok(sum.ln() - (logits[label] - max))
}

/// Mean over samples of the summed squared error, and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let (n, k) = batch_layout(pred)?;
    let mut grad = vec![0.0; pred.len()];
    let mut total = 0.0;
    for ((p, t), g) in pred
        .data()
        .chunks_exact(k)
        .zip(target.data().chunks_exact(k))
        .zip(grad.chunks_exact_mut(k))
    {
        total += mse_sample(p, t, g);
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Mean softmax cross-entropy against class indices, and its gradient w.r.t. `logits`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = batch_layout(logits)?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((z, &label), g) in logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .zip(grad.chunks_exact_mut(k))
    {
        total += cross_entropy_sample(z, label, g)?;
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}
