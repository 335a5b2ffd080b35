use alloc::vec;
use alloc::vec::Vec;

use super::KeyQueue;
use crate::math;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// InfoNCE for one query:
/// `−log( e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σ e^{q·k⁻/τ}) )`.
///
/// `negatives` holds the negative keys as consecutive rows of `q.len()`
/// values. Returns the loss and its gradient with respect to `q`; keys are
/// constants.
pub fn infonce(q: &[f64], k_plus: &[f64], negatives: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let d = q.len();
    if k_plus.len() != d || d == 0 || negatives.len() % d != 0 {
        return Err(Error::shape("infonce", "query, key and negatives disagree on dimension"));
    }
    if negatives.is_empty() {
        return Err(Error::Insufficient("InfoNCE needs at least one negative key".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut logits = Vec::with_capacity(1 + negatives.len() / d);
    logits.push(math::dot(q, k_plus) / tau);
    logits.extend(negatives.chunks_exact(d).map(|k| math::dot(q, k) / tau));
    let lse = math::log_sum_exp(&logits);
    let loss = lse - logits[0];

    let mut grad = vec![0.0; d];
    let p0 = math::exp(logits[0] - lse);
    for (g, k) in grad.iter_mut().zip(k_plus) {
        *g = (p0 - 1.0) * k / tau;
    }
    for (k, &l) in negatives.chunks_exact(d).zip(&logits[1..]) {
        let p = math::exp(l - lse) / tau;
        for (g, kv) in grad.iter_mut().zip(k) {
            *g += p * kv;
        }
    }
    Ok((loss, grad))
}

/// Batch-mean InfoNCE against the queue contents.
#[derive(Debug, Clone)]
pub struct InstanceLoss {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `mean` with respect to each query row.
    pub grad: Tensor,
}

pub fn infonce_batch(q: &Tensor, k_plus: &Tensor, queue: &KeyQueue, tau: f64) -> Result<InstanceLoss> {
    if q.shape() != k_plus.shape() || q.rank() != 2 || q.shape()[1] != queue.dim() {
        return Err(Error::shape("infonce_batch", "queries, keys and queue disagree"));
    }
    if queue.is_empty() {
        return Err(Error::Insufficient("InfoNCE needs a non-empty queue".into()));
    }
    let n = q.shape()[0];
    let scale = 1.0 / n as f64;
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(q.len());
    for i in 0..n {
        let (l, g) = infonce(q.row(i), k_plus.row(i), queue.negatives(), tau)?;
        per_sample.push(l);
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    let mean = per_sample.iter().sum::<f64>() * scale;
    Ok(InstanceLoss {
        mean,
        per_sample,
        grad: Tensor::new(q.shape().to_vec(), grad)?,
    })
}
