//! 2-D convolution (stride, zero padding, dilation, groups) and the
//! depthwise-separable composition, with gradients for input, weight and
//! bias.
//!
//! Forward lowers each (batch, group) slice to a column matrix and runs one
//! gemm; backward recomputes the columns instead of caching them, trading a
//! little time for activation memory.

use super::{grad_needs, make_op, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Geometry of a convolution. Dilated taps sit at offsets
/// `{0, d, 2d, ..., (k-1)d}` from the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
    /// "Same" padding for a stride-1 odd kernel with the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::default()
            .padding(dilation * (kernel - 1) / 2)
            .dilation(dilation)
    }
}

fn out_extent(input: usize, kernel: usize, pad: usize, stride: usize, dilation: usize) -> Option<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < effective {
        None
    } else {
        Some((padded - effective) / stride + 1)
    }
}

struct ConvGeom {
    in_shape: Shape,
    w_shape: Shape,
    out_shape: Shape,
    spec: ConvSpec,
    group_in: usize,  // input channels per group
    group_out: usize, // output channels per group
}

fn validate(input: Shape, weight: Shape, bias: Option<Shape>, spec: ConvSpec) -> Result<ConvGeom> {
    let g = spec.groups;
    if g == 0 || spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
        return Err(Error::Config("conv2d stride, dilation and groups must be positive".into()));
    }
    let (cin, cout) = (input.channels(), weight.batch());
    if cin % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input channel extent {cin} is not divisible by groups {g}"),
        ));
    }
    if cout % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output channel extent {cout} is not divisible by groups {g}"),
        ));
    }
    if weight.channels() != cin / g {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight channel extent {} does not match input channels per group {} (= {cin}/{g})",
                weight.channels(),
                cin / g
            ),
        ));
    }
    if let Some(bs) = bias {
        if bs.channels() != cout || bs.batch() != 1 || bs.height() != 1 || bs.width() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bs} must be (1, {cout}, 1, 1)"),
            ));
        }
    }
    let oh = out_extent(input.height(), weight.height(), spec.padding.0, spec.stride.0, spec.dilation.0);
    let ow = out_extent(input.width(), weight.width(), spec.padding.1, spec.stride.1, spec.dilation.1);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "output extent would be empty: input {}x{} kernel {}x{} (dilation {:?}, padding {:?})",
                    input.height(),
                    input.width(),
                    weight.height(),
                    weight.width(),
                    spec.dilation,
                    spec.padding
                ),
            ))
        }
    };
    Ok(ConvGeom {
        in_shape: input,
        w_shape: weight,
        out_shape: Shape::new(input.batch(), cout, oh, ow),
        spec,
        group_in: cin / g,
        group_out: cout / g,
    })
}

/// Gathers the receptive-field columns of one (batch, group) slice into
/// `col`, a `(group_in * kh * kw) x (oh * ow)` row-major matrix.
fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom, b: usize, g: usize, col: &mut [T]) {
    let (ih, iw) = (geom.in_shape.height(), geom.in_shape.width());
    let (kh, kw) = (geom.w_shape.height(), geom.w_shape.width());
    let (oh, ow) = (geom.out_shape.height(), geom.out_shape.width());
    let (sh, sw) = geom.spec.stride;
    let (ph, pw) = geom.spec.padding;
    let (dh, dw) = geom.spec.dilation;
    let n = oh * ow;
    col.fill(T::zero());
    for ic in 0..geom.group_in {
        let chan = &x[geom.in_shape.index(b, g * geom.group_in + ic, 0, 0)..][..ih * iw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ic * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let src_row = iy as usize * iw;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix >= 0 && ix < iw as isize {
                            col[dst_row + ox] = chan[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-gradient matrix back onto the input gradient of
/// one (batch, group) slice; exact adjoint of [`im2col`].
fn col2im<T: Scalar>(col: &[T], geom: &ConvGeom, b: usize, g: usize, dx: &mut [T]) {
    let (ih, iw) = (geom.in_shape.height(), geom.in_shape.width());
    let (kh, kw) = (geom.w_shape.height(), geom.w_shape.width());
    let (oh, ow) = (geom.out_shape.height(), geom.out_shape.width());
    let (sh, sw) = geom.spec.stride;
    let (ph, pw) = geom.spec.padding;
    let (dh, dw) = geom.spec.dilation;
    let n = oh * ow;
    for ic in 0..geom.group_in {
        let base = geom.in_shape.index(b, g * geom.group_in + ic, 0, 0);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ic * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst_row = base + iy as usize * iw;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix >= 0 && ix < iw as isize {
                            dx[dst_row + ix as usize] += col[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, geom: &ConvGeom) -> Vec<T> {
    let (batch, groups) = (geom.in_shape.batch(), geom.spec.groups);
    let k = geom.group_in * geom.w_shape.height() * geom.w_shape.width();
    let n = geom.out_shape.height() * geom.out_shape.width();
    let mut out = vec![T::zero(); geom.out_shape.numel()];
    let mut col = vec![T::zero(); k * n];
    for b in 0..batch {
        for g in 0..groups {
            im2col(x, geom, b, g, &mut col);
            let w_g = &w[g * geom.group_out * k..(g + 1) * geom.group_out * k];
            let out_g = &mut out[geom.out_shape.index(b, g * geom.group_out, 0, 0)..][..geom.group_out * n];
            T::gemm(geom.group_out, k, n, w_g, &col, out_g);
        }
    }
    if let Some(bias) = bias {
        for b in 0..batch {
            for (oc, &bv) in bias.iter().enumerate() {
                let row = &mut out[geom.out_shape.index(b, oc, 0, 0)..][..n];
                for v in row {
                    *v += bv;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Dilated, strided, grouped cross-correlation of `self` with `weight`
    /// (`(out_channels, in_channels/groups, kh, kw)`), plus optional bias
    /// (`(1, out_channels, 1, 1)`).
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        let geom = validate(self.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
        let out = forward(self.data(), weight.data(), bias.map(|b| b.data()), &geom);
        let out_shape = geom.out_shape;

        let inputs: Vec<&Tensor<T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let needs = grad_needs(&inputs);
        let x_data = Arc::new(self.to_vec());
        let w_data = Arc::new(weight.to_vec());
        let has_bias = bias.is_some();

        Ok(make_op(&inputs, out_shape, out, move |up| {
            let k = geom.group_in * geom.w_shape.height() * geom.w_shape.width();
            let n = geom.out_shape.height() * geom.out_shape.width();
            let (batch, groups) = (geom.in_shape.batch(), geom.spec.groups);
            let mut dx = if needs[0] {
                Some(vec![T::zero(); geom.in_shape.numel()])
            } else {
                None
            };
            let mut dw = if needs[1] {
                Some(vec![T::zero(); geom.w_shape.numel()])
            } else {
                None
            };
            if dx.is_some() || dw.is_some() {
                let mut col = vec![T::zero(); k * n];
                let mut col_grad = vec![T::zero(); k * n];
                for b in 0..batch {
                    for g in 0..groups {
                        let up_g = &up[geom.out_shape.index(b, g * geom.group_out, 0, 0)..][..geom.group_out * n];
                        if let Some(dw) = dw.as_mut() {
                            im2col(x_data.as_slice(), &geom, b, g, &mut col);
                            // dW_g += dOut_g (Cog x N) . col^T (N x K)
                            let dw_g = &mut dw[g * geom.group_out * k..(g + 1) * geom.group_out * k];
                            T::gemm_strided(
                                geom.group_out,
                                n,
                                k,
                                T::one(),
                                up_g,
                                n as isize,
                                1,
                                &col,
                                1,
                                n as isize,
                                T::one(),
                                dw_g,
                                k as isize,
                                1,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            // colGrad = W_g^T (K x Cog) . dOut_g (Cog x N)
                            let w_g = &w_data[g * geom.group_out * k..(g + 1) * geom.group_out * k];
                            T::gemm_strided(
                                k,
                                geom.group_out,
                                n,
                                T::one(),
                                w_g,
                                1,
                                k as isize,
                                up_g,
                                n as isize,
                                1,
                                T::zero(),
                                &mut col_grad,
                                n as isize,
                                1,
                            );
                            col2im(&col_grad, &geom, b, g, dx);
                        }
                    }
                }
            }
            let db = if has_bias && needs[2] {
                let cout = geom.out_shape.channels();
                let mut db = vec![T::zero(); cout];
                for b in 0..batch {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let row = &up[geom.out_shape.index(b, oc, 0, 0)..][..n];
                        for &g in row {
                            *acc += g;
                        }
                    }
                }
                Some(db)
            } else {
                None
            };
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(db);
            }
            grads
        }))
    }

    /// Per-channel (depthwise) convolution followed by a 1x1 pointwise
    /// convolution. The depth stage keeps the channel count; the bias, when
    /// given, attaches to the pointwise stage.
    pub fn depthwise_separable(
        &self,
        depth_weight: &Tensor<T>,
        point_weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        depth_spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        let c = self.shape().channels();
        let dw = depth_weight.shape();
        if dw.batch() != c || dw.channels() != 1 {
            return Err(Error::shape(
                "depthwise_separable",
                format!("depth weight {dw} must be ({c}, 1, kh, kw) for {c} input channels"),
            ));
        }
        let pw = point_weight.shape();
        if pw.height() != 1 || pw.width() != 1 {
            return Err(Error::shape(
                "depthwise_separable",
                format!("point weight {pw} must use 1x1 kernels"),
            ));
        }
        let depth = self.conv2d(depth_weight, None, ConvSpec { groups: c, ..depth_spec })?;
        depth.conv2d(point_weight, bias, ConvSpec::default())
    }
}
