//! Classical-momentum SGD.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::segnet::Params;

/// `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_momentum_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every tensor of a [`Params`] set.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &Params, momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one step using the gradients accumulated in `params`.
    /// Tensors without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut Params, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd", "velocity does not match parameter count"));
        }
        for ((_, t), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            sgd_momentum_step(t.data_mut(), &grad, v, lr, self.momentum)?;
        }
        Ok(())
    }
}
