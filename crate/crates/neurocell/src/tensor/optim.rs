use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// SGD with momentum: v ← momentum·v + grad, p ← p − lr·v.
/// Gradients are zeroed after every step. Velocity buffers are keyed by
/// parameter identity and shape-match their parameters.
pub struct Sgd<T: Scalar> {
    lr: T,
    momentum: T,
    velocity: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if lr <= T::zero() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {momentum}")));
        }
        Ok(Sgd { lr, momentum, velocity: HashMap::new() })
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        for p in params {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!(
                    "optimizer_step: trainable parameter of shape {:?} has no gradient",
                    p.shape()
                ))
            })?;
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![T::zero(); p.len()]);
            debug_assert_eq!(v.len(), p.len());
            let mut data = p.data_mut();
            for ((pv, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                *vv = self.momentum * *vv + *gv;
                *pv = *pv - self.lr * *vv;
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }
}
