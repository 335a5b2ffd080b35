use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::{Param, Tensor};
use crate::math;
use crate::{Error, Result};

/// SGD with classical momentum and additive weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {weight_decay} is negative")));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocities: Vec::new(),
        })
    }

    /// Restores saved velocities; shapes are validated on the next `step`.
    pub fn with_velocities(mut self, velocities: Vec<Tensor>) -> Self {
        self.velocities = velocities;
        self
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Applies one update to `params`, which must be passed in the same
    /// order on every call. Velocities are created lazily at zero.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {lr}")));
        }
        let params: Vec<&mut Param> = params.into_iter().collect();
        for p in &params {
            p.grad.check_finite(&format!("gradient of {}", p.name))?;
        }
        if self.velocities.is_empty() {
            self.velocities = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::shape(
                "Sgd::step",
                format!("{} velocities for {} parameters", self.velocities.len(), params.len()),
            ));
        }
        for (p, v) in params.into_iter().zip(&mut self.velocities) {
            if v.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::shape(
                    "Sgd::step",
                    format!("{}: velocity {:?}, value {:?}", p.name, v.shape(), p.value.shape()),
                ));
            }
            let (mu, wd) = (self.momentum, self.weight_decay);
            for ((theta, g), vel) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut())
            {
                *vel = mu * *vel + g + wd * *theta;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr0` at step 0 to zero at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule with zero total steps"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total}")));
    }
    Ok(0.5 * lr0 * (1.0 + math::cos(PI * step as f64 / total as f64)))
}
