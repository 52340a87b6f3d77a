//! Learned block-based sampling: a strided convolution with no bias and no
//! activation, whose weight can run as the latent float matrix, its sign
//! binarization, or the mask-pruned ternary form `alpha * sign(w) * mask`.
//!
//! Quantized modes use straight-through updates: the forward pass sees the
//! quantized weight while gradients land on the latent floats, exactly as
//! they would on the effective weight (masked-out entries get zero).

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{make_op, ConvSpec, Parameter, Shape, Tensor};

/// Geometry of the sampler: block size, measurement rate, image channels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub block_size: usize,
    pub subrate: f64,
    pub in_channels: usize,
}

impl SamplerConfig {
    pub fn new(block_size: usize, subrate: f64, in_channels: usize) -> Result<Self> {
        let cfg = SamplerConfig {
            block_size,
            subrate,
            in_channels,
        };
        cfg.out_channels()?;
        Ok(cfg)
    }

    /// Number of measurement channels: `floor(bs * bs * subrate * in_channels)`.
    pub fn out_channels(&self) -> Result<usize> {
        if self.block_size == 0 || self.in_channels == 0 {
            return Err(Error::Config("block_size and in_channels must be positive".into()));
        }
        if !(self.subrate > 0.0 && self.subrate <= 1.0) {
            return Err(Error::Config(format!("subrate must lie in (0, 1], got {}", self.subrate)));
        }
        let raw = (self.block_size * self.block_size * self.in_channels) as f64 * self.subrate;
        let out = raw.floor() as usize;
        if out < 1 {
            return Err(Error::Config(format!(
                "configuration yields {out} output channels (bs={}, subrate={}, in={}); need at least 1",
                self.block_size, self.subrate, self.in_channels
            )));
        }
        Ok(out)
    }

    /// Shape of the latent sampling weight.
    pub fn weight_shape(&self) -> Result<Shape> {
        Ok(Shape::new(
            self.out_channels()?,
            self.in_channels,
            self.block_size,
            self.block_size,
        ))
    }
}

/// {0,1} pruning mask congruent to the latent sampling weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Shape,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(shape: Shape, values: Vec<u8>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::shape(
                "mask",
                format!("mask carries {} values for shape {shape}", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask element {bad} is not in {{0, 1}}")));
        }
        Ok(Mask { shape, values })
    }

    pub fn ones(shape: Shape) -> Self {
        Mask {
            shape,
            values: vec![1; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Which view of the latent weight the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Float,
    Binary,
    Ternary,
}

/// Sign binarization: +1 where the value is >= 0, -1 otherwise.
pub fn binarize<T: Scalar>(values: &[T]) -> Vec<T> {
    values
        .iter()
        .map(|&v| if v >= T::zero() { T::one() } else { -T::one() })
        .collect()
}

/// The learned sampling layer. No bias, no activation, stride = block size.
pub struct SamplingLayer<T: Scalar> {
    cfg: SamplerConfig,
    latent: Parameter<T>,
    alpha: Parameter<T>,
    mode: SamplerMode,
    mask: Option<Mask>,
}

impl<T: Scalar> SamplingLayer<T> {
    /// Fresh layer in float mode; latent weights drawn from
    /// N(0, 1/block_size), alpha starting at zero until ternarization.
    pub fn new(cfg: SamplerConfig, rng: &mut DetRng) -> Result<Self> {
        let shape = cfg.weight_shape()?;
        let std = 1.0 / cfg.block_size as f64;
        let data = (0..shape.numel()).map(|_| T::of_f64(rng.normal() * std)).collect();
        Ok(SamplingLayer {
            cfg,
            latent: Parameter::new("sampler.latent", shape, data),
            alpha: Parameter::scalar("sampler.alpha", T::zero()),
            mode: SamplerMode::Float,
            mask: None,
        })
    }

    /// Rebuild a layer from checkpointed parts.
    pub fn from_parts(
        cfg: SamplerConfig,
        latent: Parameter<T>,
        alpha: Parameter<T>,
        mode: SamplerMode,
        mask: Option<Mask>,
    ) -> Result<Self> {
        let shape = cfg.weight_shape()?;
        if latent.shape() != shape {
            return Err(Error::shape(
                "sampling_layer",
                format!("latent shape {} does not match config shape {shape}", latent.shape()),
            ));
        }
        if let Some(m) = &mask {
            if m.shape() != shape {
                return Err(Error::shape(
                    "sampling_layer",
                    format!("mask shape {} does not match latent shape {shape}", m.shape()),
                ));
            }
        }
        if mode == SamplerMode::Ternary && mask.is_none() {
            return Err(Error::Config("ternary mode requires a mask".into()));
        }
        Ok(SamplingLayer {
            cfg,
            latent,
            alpha,
            mode,
            mask,
        })
    }

    pub fn config(&self) -> SamplerConfig {
        self.cfg
    }
    pub fn mode(&self) -> SamplerMode {
        self.mode
    }
    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }
    pub fn latent(&self) -> &Parameter<T> {
        &self.latent
    }
    pub fn alpha(&self) -> &Parameter<T> {
        &self.alpha
    }
    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels().expect("validated at construction")
    }

    /// Effective weight as a graph tensor for the current mode.
    ///
    /// In binary and ternary modes the backward pass is straight-through:
    /// the latent gradient equals the gradient on the effective weight
    /// (masked entries receive zero), and alpha receives
    /// `sum(sign(latent) * mask * upstream)`.
    pub fn effective_weight(&self) -> Tensor<T> {
        let shape = self.latent.shape();
        match self.mode {
            SamplerMode::Float => self.latent.tensor(),
            SamplerMode::Binary => {
                let lt = self.latent.tensor();
                let signs = binarize(lt.data());
                make_op(&[&lt], shape, signs, move |up| vec![Some(up.to_vec())])
            }
            SamplerMode::Ternary => {
                let mask = self.mask.as_ref().expect("ternary mode carries a mask");
                let lt = self.latent.tensor();
                let at = self.alpha.tensor();
                let alpha = at.item();
                let gated: Vec<T> = binarize(lt.data())
                    .iter()
                    .zip(mask.values())
                    .map(|(&s, &m)| if m == 1 { s } else { T::zero() })
                    .collect();
                let eff: Vec<T> = gated.iter().map(|&t| alpha * t).collect();
                let gated_back = gated;
                make_op(&[&lt, &at], shape, eff, move |up| {
                    let dlatent = up
                        .iter()
                        .zip(&gated_back)
                        .map(|(&g, &t)| if t == T::zero() { T::zero() } else { g })
                        .collect();
                    let dalpha = gated_back.iter().zip(up).map(|(&t, &g)| t * g).sum();
                    vec![Some(dlatent), Some(vec![dalpha])]
                })
            }
        }
    }

    /// Detached effective weight values for the current mode.
    pub fn effective_weight_values(&self) -> Vec<T> {
        self.effective_weight().to_vec()
    }

    /// Block-based measurement: convolution with stride = block size.
    /// Image extents must be exact multiples of the block size.
    pub fn sample(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let bs = self.cfg.block_size;
        let s = image.shape();
        if s.channels() != self.cfg.in_channels {
            return Err(Error::shape(
                "sample",
                format!(
                    "image channel extent {} does not match sampler in_channels {}",
                    s.channels(),
                    self.cfg.in_channels
                ),
            ));
        }
        if s.height() < bs || s.width() < bs {
            return Err(Error::InputTooSmall {
                height: s.height(),
                width: s.width(),
                block_size: bs,
            });
        }
        if s.height() % bs != 0 || s.width() % bs != 0 {
            return Err(Error::InputNotDivisible {
                height: s.height(),
                width: s.width(),
                block_size: bs,
            });
        }
        let weight = self.effective_weight();
        image.conv2d(&weight, None, ConvSpec::default().stride(bs))
    }

    /// Switch the forward view to sign(latent).
    pub fn set_binary(&mut self) {
        self.mode = SamplerMode::Binary;
    }

    /// Switch back to the latent float weight.
    pub fn set_float(&mut self) {
        self.mode = SamplerMode::Float;
    }

    /// Install the pruning mask and enter ternary mode; the effective
    /// weight becomes `alpha * sign(latent) * mask`.
    pub fn ternarize(&mut self, mask: Mask) -> Result<()> {
        if mask.shape() != self.latent.shape() {
            return Err(Error::shape(
                "ternarize",
                format!(
                    "mask shape {} does not match latent shape {}",
                    mask.shape(),
                    self.latent.shape()
                ),
            ));
        }
        self.mask = Some(mask);
        self.mode = SamplerMode::Ternary;
        Ok(())
    }

    /// Initialize alpha to the mean absolute latent weight. A zero latent
    /// is degenerate and leaves alpha at zero.
    pub fn init_alpha(&mut self) {
        let values = self.latent.value();
        let mean_abs =
            values.iter().map(|v| v.abs().as_f64()).sum::<f64>() / values.len().max(1) as f64;
        if mean_abs == 0.0 {
            log::warn!("init_alpha: latent weight is all zero; alpha set to 0 (degenerate)");
        }
        self.alpha.set_value(&[T::of_f64(mean_abs)]);
    }
}
