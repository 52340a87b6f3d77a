//! Adam optimizer over a set of parameters.

use super::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First/second-moment adaptive optimizer with bias correction.
#[derive(Debug, Clone, Copy)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
        }
    }

    pub fn with_lr(self, lr: T) -> Self {
        Adam { lr, ..self }
    }

    /// Applies one update to every parameter and clears its gradient.
    /// Every parameter must carry a gradient from a backward pass.
    pub fn step(&self, params: &[Parameter<T>]) -> Result<()> {
        for p in params {
            if p.grad().is_none() {
                return Err(Error::MissingGradient {
                    name: p.name().to_string(),
                });
            }
        }
        for p in params {
            p.adam_update(self.lr, self.beta1, self.beta2, self.eps);
        }
        Ok(())
    }
}

/// Clears gradients on all given parameters.
pub fn zero_grads<T: Scalar>(params: &[Parameter<T>]) {
    for p in params {
        p.zero_grad();
    }
}
