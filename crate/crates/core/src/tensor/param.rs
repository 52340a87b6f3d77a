//! Trainable parameters: value, gradient accumulator, optimizer state.

use super::autograd::Node;
use super::{Shape, Tensor};
use crate::scalar::Scalar;
use std::sync::{Arc, RwLock};

pub(crate) struct ParamInner<T: Scalar> {
    name: String,
    shape: Shape,
    state: RwLock<ParamState<T>>,
}

struct ParamState<T> {
    value: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
    moment1: Vec<T>,
    moment2: Vec<T>,
    step: u64,
}

impl<T: Scalar> ParamInner<T> {
    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        let mut state = self.state.write().unwrap();
        match state.grad.as_mut() {
            Some(g) => {
                for (dst, &src) in g.iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => state.grad = Some(contribution.to_vec()),
        }
    }
}

/// A named, trainable tensor. Cheap to clone; clones share the underlying
/// value, gradient accumulator and optimizer state.
#[derive(Clone)]
pub struct Parameter<T: Scalar> {
    inner: Arc<ParamInner<T>>,
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter(`{}`, {})", self.inner.name, self.inner.shape)
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Shape, value: Vec<T>) -> Self {
        assert_eq!(value.len(), shape.numel(), "parameter value length");
        let n = value.len();
        Parameter {
            inner: Arc::new(ParamInner {
                name: name.into(),
                shape,
                state: RwLock::new(ParamState {
                    value: Arc::new(value),
                    grad: None,
                    moment1: vec![T::zero(); n],
                    moment2: vec![T::zero(); n],
                    step: 0,
                }),
            }),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        let n = shape.numel();
        Parameter::new(name, shape, vec![T::zero(); n])
    }

    /// Scalar parameter of shape (1,1,1,1).
    pub fn scalar(name: impl Into<String>, value: T) -> Self {
        Parameter::new(name, Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    /// Snapshot of the current value.
    pub fn value(&self) -> Vec<T> {
        self.inner.state.read().unwrap().value.as_ref().clone()
    }

    /// Current value as a graph leaf: gradients that reach it accumulate on
    /// this parameter.
    pub fn tensor(&self) -> Tensor<T> {
        let state = self.inner.state.read().unwrap();
        let node = Node::leaf(self.inner.shape, Some(Arc::clone(&self.inner)));
        Tensor::with_node_arc(self.inner.shape, Arc::clone(&state.value), Some(node))
    }

    /// Current value with no graph attachment.
    pub fn constant(&self) -> Tensor<T> {
        let state = self.inner.state.read().unwrap();
        Tensor::with_node_arc(self.inner.shape, Arc::clone(&state.value), None)
    }

    pub fn set_value(&self, value: &[T]) {
        assert_eq!(value.len(), self.numel(), "parameter value length");
        let mut state = self.inner.state.write().unwrap();
        state.value = Arc::new(value.to_vec());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.state.read().unwrap().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.state.write().unwrap().grad = None;
    }

    /// Clamp every value element to `[lo, hi]` in place.
    pub fn clamp_values(&self, lo: T, hi: T) {
        let mut state = self.inner.state.write().unwrap();
        let value = Arc::make_mut(&mut state.value);
        for v in value.iter_mut() {
            *v = (*v).max(lo).min(hi);
        }
    }

    /// Optimizer state as (moment1, moment2, step).
    pub fn optimizer_state(&self) -> (Vec<T>, Vec<T>, u64) {
        let state = self.inner.state.read().unwrap();
        (state.moment1.clone(), state.moment2.clone(), state.step)
    }

    pub fn set_optimizer_state(&self, moment1: &[T], moment2: &[T], step: u64) {
        assert_eq!(moment1.len(), self.numel());
        assert_eq!(moment2.len(), self.numel());
        let mut state = self.inner.state.write().unwrap();
        state.moment1.copy_from_slice(moment1);
        state.moment2.copy_from_slice(moment2);
        state.step = step;
    }

    /// One Adam update using the accumulated gradient. Internal to
    /// [`super::Adam`]; callers go through the optimizer.
    pub(crate) fn adam_update(&self, lr: T, beta1: T, beta2: T, eps: T) -> Option<()> {
        let mut state = self.inner.state.write().unwrap();
        let grad = state.grad.take()?;
        state.step += 1;
        let step = state.step;
        let one = T::one();
        let bias1 = one - beta1.powi(step as i32);
        let bias2 = one - beta2.powi(step as i32);
        // Split borrows: moments update first, then the value.
        for i in 0..grad.len() {
            let g = grad[i];
            state.moment1[i] = beta1 * state.moment1[i] + (one - beta1) * g;
            state.moment2[i] = beta2 * state.moment2[i] + (one - beta2) * g * g;
        }
        let ParamState {
            value, moment1, moment2, ..
        } = &mut *state;
        let value = Arc::make_mut(value);
        for i in 0..value.len() {
            let m_hat = moment1[i] / bias1;
            let v_hat = moment2[i] / bias2;
            value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Some(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn with_node_arc(
        shape: Shape,
        data: Arc<Vec<T>>,
        node: Option<Arc<Node<T>>>,
    ) -> Self {
        Tensor { shape, data, node }
    }
}
