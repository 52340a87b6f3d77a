//! Dense rank-4 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable `(batch, channel, height, width)` value.
//! Ops build a graph of [`autograd::Node`]s behind the scenes; calling
//! [`Tensor::backward`] on a scalar loss walks that graph once and deposits
//! gradients on every reachable [`Parameter`]. Forward values are plain
//! `Arc<Vec<T>>` buffers, so cloning tensors and capturing them in backward
//! closures is cheap.

mod adam;
mod attn;
mod autograd;
mod conv;
mod param;

pub use adam::Adam;
pub use conv::ConvSpec;
pub use param::Parameter;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use autograd::Node;
use std::sync::Arc;

/// Extents of a rank-4 tensor: `(batch, channel, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }
    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn channels(&self) -> usize {
        self.0[1]
    }
    pub fn height(&self) -> usize {
        self.0[2]
    }
    pub fn width(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    /// Row-major flat offset of `(b, c, h, w)`.
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(b < self.0[0] && c < self.0[1] && h < self.0[2] && w < self.0[3]);
        ((b * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Dense rank-4 array with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
    node: Option<Arc<Node<T>>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{} tracked={} data={:?}",
            self.shape,
            self.node.is_some(),
            &self.data[..self.data.len().min(8)]
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {} needs {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); shape.numel()]),
            node: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            node: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    /// Scalar tensor of shape (1, 1, 1, 1).
    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value at `(b, c, h, w)`.
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(b, c, h, w)]
    }

    /// Scalar value of a (1,1,1,1) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Mark this tensor as a differentiable leaf. Its gradient is readable
    /// through [`Tensor::grad`] after backward.
    pub fn tracked(mut self) -> Self {
        if self.node.is_none() {
            self.node = Some(Node::leaf(self.shape, None));
        }
        self
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Gradient accumulated on this tensor by the latest backward pass,
    /// if the tensor participates in a graph.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.as_ref().and_then(|n| n.grad())
    }

    /// Reverse-mode sweep from a scalar loss. Populates gradients on every
    /// reachable parameter and tracked leaf. A graph can be walked once;
    /// a second call on the same loss is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.to_string(),
            });
        }
        match &self.node {
            Some(node) => autograd::run_backward(node),
            // A constant loss has no graph; nothing is reachable.
            None => Ok(()),
        }
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<T>>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(shape: Shape, data: Vec<T>, node: Option<Arc<Node<T>>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }
}

/// Builds an op tensor: computes nothing itself, just wires `data` to the
/// graph. `backward` receives the upstream gradient and returns one optional
/// gradient per entry of `inputs` (None for inputs it does not reach).
pub(crate) fn make_op<T: Scalar>(
    inputs: &[&Tensor<T>],
    shape: Shape,
    data: Vec<T>,
    backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
) -> Tensor<T> {
    let parents: Vec<(usize, Arc<Node<T>>)> = inputs
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.node.as_ref().map(|n| (i, Arc::clone(n))))
        .collect();
    let node = if parents.is_empty() {
        None
    } else {
        Some(Node::op(shape, parents, Box::new(backward)))
    };
    Tensor::with_node(shape, data, node)
}

/// Which inputs of an op actually need a gradient, so expensive backward
/// paths can be skipped for constants.
pub(crate) fn grad_needs<T: Scalar>(inputs: &[&Tensor<T>]) -> Vec<bool> {
    inputs.iter().map(|t| t.node.is_some()).collect()
}

// ── Elementwise and structural ops ─────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("operands differ: {} vs {}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a + b).collect();
        Ok(make_op(&[self, other], self.shape, data, move |up| {
            vec![Some(up.to_vec()), Some(up.to_vec())]
        }))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a - b).collect();
        Ok(make_op(&[self, other], self.shape, data, move |up| {
            vec![Some(up.to_vec()), Some(up.iter().map(|&g| -g).collect())]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).collect();
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&other.data);
        Ok(make_op(&[self, other], self.shape, data, move |up| {
            vec![
                Some(up.iter().zip(b.iter()).map(|(&g, &bv)| g * bv).collect()),
                Some(up.iter().zip(a.iter()).map(|(&g, &av)| g * av).collect()),
            ]
        }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data.iter().map(|&v| v * factor).collect();
        make_op(&[self], self.shape, data, move |up| {
            vec![Some(up.iter().map(|&g| g * factor).collect())]
        })
    }

    /// Multiply by a (1,1,1,1) tensor, typically a learned scalar such as a
    /// residual gate. Differentiable in both operands.
    pub fn scale_by(&self, factor: &Tensor<T>) -> Result<Tensor<T>> {
        if factor.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("factor must be scalar, got {}", factor.shape),
            ));
        }
        let s = factor.data[0];
        let data = self.data.iter().map(|&v| v * s).collect();
        let x = Arc::clone(&self.data);
        Ok(make_op(&[self, factor], self.shape, data, move |up| {
            let dx = up.iter().map(|&g| g * s).collect();
            let ds = up.iter().zip(x.iter()).map(|(&g, &xv)| g * xv).sum();
            vec![Some(dx), Some(vec![ds])]
        }))
    }

    /// max(x, slope * x); `slope` must lie in (0, 1).
    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::Config(format!("leaky_relu slope must be in (0,1), got {slope}")));
        }
        let data = self
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let x = Arc::clone(&self.data);
        Ok(make_op(&[self], self.shape, data, move |up| {
            let dx = up
                .iter()
                .zip(x.iter())
                .map(|(&g, &xv)| if xv > T::zero() { g } else { g * slope })
                .collect();
            vec![Some(dx)]
        }))
    }

    /// Channel concatenation; `self` occupies the leading channels.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape, other.shape);
        if a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width() {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/height/width must match: {a} vs {b}"),
            ));
        }
        let (ca, cb) = (a.channels(), b.channels());
        let shape = Shape::new(a.batch(), ca + cb, a.height(), a.width());
        let plane = a.height() * a.width();
        let mut data = Vec::with_capacity(shape.numel());
        for bi in 0..a.batch() {
            let sa = bi * ca * plane;
            data.extend_from_slice(&self.data[sa..sa + ca * plane]);
            let sb = bi * cb * plane;
            data.extend_from_slice(&other.data[sb..sb + cb * plane]);
        }
        let batch = a.batch();
        Ok(make_op(&[self, other], shape, data, move |up| {
            let mut ga = vec![T::zero(); batch * ca * plane];
            let mut gb = vec![T::zero(); batch * cb * plane];
            for bi in 0..batch {
                let src = bi * (ca + cb) * plane;
                ga[bi * ca * plane..(bi + 1) * ca * plane]
                    .copy_from_slice(&up[src..src + ca * plane]);
                gb[bi * cb * plane..(bi + 1) * cb * plane]
                    .copy_from_slice(&up[src + ca * plane..src + (ca + cb) * plane]);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Rearranges `(b, c*s*s, h, w)` into `(b, c, h*s, w*s)`; a pure
    /// permutation of elements.
    pub fn pixel_shuffle(&self, upscale: usize) -> Result<Tensor<T>> {
        if upscale == 0 {
            return Err(Error::Config("pixel_shuffle upscale must be positive".into()));
        }
        let s = upscale;
        let sh = self.shape;
        if sh.channels() % (s * s) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("channel extent {} not divisible by upscale^2 = {}", sh.channels(), s * s),
            ));
        }
        let (b, c_out) = (sh.batch(), sh.channels() / (s * s));
        let (h, w) = (sh.height(), sh.width());
        let out_shape = Shape::new(b, c_out, h * s, w * s);
        let perm = shuffle_permutation(sh, s);
        let mut data = vec![T::zero(); out_shape.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            data[dst] = self.data[src];
        }
        let n_in = sh.numel();
        let perm_back = perm;
        Ok(make_op(&[self], out_shape, data, move |up| {
            let mut dx = vec![T::zero(); n_in];
            for (dst, &src) in perm_back.iter().enumerate() {
                dx[src] = up[dst];
            }
            vec![Some(dx)]
        }))
    }

    /// Mean of squared elementwise differences; returns a scalar tensor.
    pub fn mse_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(target, "mse_loss")?;
        let n = T::of_f64(self.numel() as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.data.iter().zip(target.data.iter()) {
            let d = p - t;
            acc = acc + d * d;
        }
        let value = acc / n;
        let p = Arc::clone(&self.data);
        let t = Arc::clone(&target.data);
        Ok(make_op(
            &[self, target],
            Shape::new(1, 1, 1, 1),
            vec![value],
            move |up| {
                let g = up[0];
                let two = T::of_f64(2.0);
                let dp: Vec<T> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(&pv, &tv)| two * (pv - tv) / n * g)
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                vec![Some(dp), Some(dt)]
            },
        ))
    }

    /// Sum of all elements; returns a scalar tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let value = self.data.iter().copied().sum();
        let n = self.numel();
        make_op(&[self], Shape::new(1, 1, 1, 1), vec![value], move |up| {
            vec![Some(vec![up[0]; n])]
        })
    }

    /// Clamp values to `[lo, hi]`. Not differentiable; used on final images.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| v.max(lo).min(hi)).collect()),
            node: None,
        }
    }
}

/// dst flat index -> src flat index map realizing pixel shuffle.
fn shuffle_permutation(shape: Shape, s: usize) -> Vec<usize> {
    let (b, c_in, h, w) = (shape.batch(), shape.channels(), shape.height(), shape.width());
    let c_out = c_in / (s * s);
    let out_shape = Shape::new(b, c_out, h * s, w * s);
    let mut perm = vec![0usize; out_shape.numel()];
    for bi in 0..b {
        for co in 0..c_out {
            for hy in 0..h * s {
                for wx in 0..w * s {
                    let (iy, sy) = (hy / s, hy % s);
                    let (ix, sx) = (wx / s, wx % s);
                    let ci = co * s * s + sy * s + sx;
                    perm[out_shape.index(bi, co, hy, wx)] = shape.index(bi, ci, iy, ix);
                }
            }
        }
    }
    perm
}
