//! Attention-derived importance of sampling weights and the pruning mask.
//!
//! A single self-attention head (1x1 query/key/value projections over the
//! measurement tensor, residual gate gamma starting at zero) perturbs the
//! measurements. An auxiliary sampler with the same shape as the sampling
//! weight is then fitted so that its plain convolution reproduces the
//! attention output; the elementwise gap between the fitted weight and the
//! real sampling weight scores how much attention "wants" each weight to
//! move, and the smallest scores are pruned.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::sampling::{Mask, SamplingLayer};
use crate::scalar::Scalar;
use crate::tensor::{Adam, ConvSpec, Parameter, Shape, Tensor};

/// Single-head spatial self-attention with a residual gate.
///
/// At `gamma = 0` (the initial value) the head is the identity map on the
/// measurement tensor.
pub struct AttentionHead<T: Scalar> {
    query: Parameter<T>,
    key: Parameter<T>,
    value: Parameter<T>,
    gamma: Parameter<T>,
    channels: usize,
}

impl<T: Scalar> AttentionHead<T> {
    /// Head over `channels` measurement channels; query/key project to
    /// `max(1, channels / 8)` dimensions.
    pub fn new(channels: usize, rng: &mut DetRng) -> Self {
        let dk = (channels / 8).max(1);
        let init = |rng: &mut DetRng, out: usize, inc: usize| -> Vec<T> {
            let std = (2.0 / inc as f64).sqrt();
            (0..out * inc).map(|_| T::of_f64(rng.normal() * std)).collect()
        };
        AttentionHead {
            query: Parameter::new("attention.query", Shape::new(dk, channels, 1, 1), init(rng, dk, channels)),
            key: Parameter::new("attention.key", Shape::new(dk, channels, 1, 1), init(rng, dk, channels)),
            value: Parameter::new(
                "attention.value",
                Shape::new(channels, channels, 1, 1),
                init(rng, channels, channels),
            ),
            gamma: Parameter::scalar("attention.gamma", T::zero()),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        vec![
            self.query.clone(),
            self.key.clone(),
            self.value.clone(),
            self.gamma.clone(),
        ]
    }

    /// Softmax-normalized query-key affinities, rows over output positions.
    pub fn affinity(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        let q = measurements.conv2d(&self.query.tensor(), None, ConvSpec::default())?;
        let k = measurements.conv2d(&self.key.tensor(), None, ConvSpec::default())?;
        Ok(q.attention_scores(&k)?.softmax_rows())
    }

    /// `measurements + gamma * attention(measurements)`; shape-preserving.
    pub fn forward(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        if measurements.shape().channels() != self.channels {
            return Err(Error::shape(
                "attention_forward",
                format!(
                    "measurement channel extent {} does not match head channels {}",
                    measurements.shape().channels(),
                    self.channels
                ),
            ));
        }
        let affinity = self.affinity(measurements)?;
        let v = measurements.conv2d(&self.value.tensor(), None, ConvSpec::default())?;
        let attended = v.attention_apply(&affinity)?;
        measurements.add(&attended.scale_by(&self.gamma.tensor())?)
    }
}

/// Stand-in sampling weight fitted to reproduce the attention output by
/// plain convolution. Starts at zero, which biases gradient descent toward
/// the minimum-norm interpolant.
pub struct AuxiliarySampler<T: Scalar> {
    weight: Parameter<T>,
    block_size: usize,
}

impl<T: Scalar> AuxiliarySampler<T> {
    pub fn new(weight_shape: Shape, block_size: usize) -> Self {
        AuxiliarySampler {
            weight: Parameter::zeros("auxiliary.weight", weight_shape),
            block_size,
        }
    }

    /// Congruent to the given sampler's latent weight.
    pub fn for_sampler(layer: &SamplingLayer<T>) -> Self {
        AuxiliarySampler::new(layer.latent().shape(), layer.config().block_size)
    }

    pub fn weight(&self) -> &Parameter<T> {
        &self.weight
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        images.conv2d(
            &self.weight.tensor(),
            None,
            ConvSpec::default().stride(self.block_size),
        )
    }
}

/// Fits the auxiliary weight to minimize the mean squared distance between
/// its measurements and the attention targets. Returns the per-step
/// objective trace; ten consecutive increases abort as divergence.
pub fn fit_auxiliary<T: Scalar>(
    aux: &AuxiliarySampler<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let opt = Adam::new(T::of_f64(lr));
    let params = vec![aux.weight.clone()];
    let targets = targets.detach();
    let mut trace = Vec::with_capacity(steps);
    let mut rising = 0u32;
    for _ in 0..steps {
        aux.weight.zero_grad();
        let loss = aux.forward(images)?.mse_loss(&targets)?;
        let value = loss.item().as_f64();
        if let Some(&prev) = trace.last() {
            if value > prev {
                rising += 1;
                if rising >= 10 {
                    return Err(Error::AuxiliaryDivergence { count: rising });
                }
            } else {
                rising = 0;
            }
        }
        trace.push(value);
        loss.backward()?;
        opt.step(&params)?;
    }
    Ok(trace)
}

/// Elementwise gap between the fitted auxiliary weight and the sampling
/// weight; large magnitudes mark weights the attention considers important.
pub struct ImportanceMap<T: Scalar> {
    shape: Shape,
    values: Vec<T>,
}

impl<T: Scalar> ImportanceMap<T> {
    /// `Y = a - b`, elementwise over congruent arrays.
    pub fn subtract(shape: Shape, a: &[T], b: &[T]) -> Result<Self> {
        if a.len() != shape.numel() || b.len() != shape.numel() {
            return Err(Error::shape(
                "importance",
                format!("operand lengths {} / {} for shape {shape}", a.len(), b.len()),
            ));
        }
        Ok(ImportanceMap {
            shape,
            values: a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs().as_f64()))
    }
}

/// Importance of each sampling weight: fitted auxiliary minus the
/// sampler's current effective weight.
pub fn importance<T: Scalar>(
    aux: &AuxiliarySampler<T>,
    sampler: &SamplingLayer<T>,
) -> Result<ImportanceMap<T>> {
    ImportanceMap::subtract(
        sampler.latent().shape(),
        &aux.weight.value(),
        &sampler.effective_weight_values(),
    )
}

/// Prunes the `round(sparsity_rate * N)` entries with the smallest |Y|;
/// ties break toward the lowest flat index.
pub fn build_mask<T: Scalar>(map: &ImportanceMap<T>, sparsity_rate: f64) -> Result<Mask> {
    prune_smallest(map.shape(), map.values(), sparsity_rate)
}

/// Magnitude fallback for the degenerate case where the importance map is
/// uniformly ~0 and carries no ranking information.
pub fn build_mask_by_magnitude<T: Scalar>(
    shape: Shape,
    weights: &[T],
    sparsity_rate: f64,
) -> Result<Mask> {
    prune_smallest(shape, weights, sparsity_rate)
}

fn prune_smallest<T: Scalar>(shape: Shape, scores: &[T], sparsity_rate: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&sparsity_rate) {
        return Err(Error::Config(format!(
            "sparsity_rate must lie in [0, 1), got {sparsity_rate}"
        )));
    }
    let n = scores.len();
    let zeros = (sparsity_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        scores[i]
            .abs()
            .as_f64()
            .total_cmp(&scores[j].abs().as_f64())
            .then(i.cmp(&j))
    });
    let mut values = vec![1u8; n];
    for &i in order.iter().take(zeros) {
        values[i] = 0;
    }
    Mask::new(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplerConfig;
    use crate::test_util::random_tensor;
    use proptest::prelude::*;

    #[test]
    fn gamma_zero_is_bitwise_identity() {
        let mut rng = DetRng::from_seed_u64(50);
        let head = AttentionHead::<f32>::new(16, &mut rng);
        let m = Tensor::<f32>::from_fn(Shape::new(2, 16, 3, 3), |_| (rng.uniform() * 2.0 - 1.0) as f32);
        let out = head.forward(&m).unwrap();
        for (a, b) in m.data().iter().zip(out.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_preserves_measurement_shape() {
        let mut rng = DetRng::from_seed_u64(51);
        let mut head = AttentionHead::<f64>::new(256, &mut rng);
        head.gamma.set_value(&[0.3]);
        let m = random_tensor(Shape::new(1, 256, 3, 3), &mut rng);
        let out = head.forward(&m).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 256, 3, 3));

        let wrong = random_tensor(Shape::new(1, 99, 3, 3), &mut rng);
        assert!(head.forward(&wrong).is_err());
    }

    #[test]
    fn affinity_rows_sum_to_one() {
        let mut rng = DetRng::from_seed_u64(52);
        let head = AttentionHead::<f64>::new(8, &mut rng);
        let m = random_tensor(Shape::new(1, 8, 2, 3), &mut rng);
        let a = head.affinity(&m).unwrap();
        assert_eq!(a.shape(), Shape::new(1, 1, 6, 6));
        for i in 0..6 {
            let sum: f64 = (0..6).map(|j| a.at(0, 0, i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_trainable_through_the_gate() {
        // Gradients reach query/key/value once gamma moves off zero.
        let mut rng = DetRng::from_seed_u64(53);
        let mut head = AttentionHead::<f64>::new(8, &mut rng);
        head.gamma.set_value(&[0.2]);
        let m = random_tensor(Shape::new(1, 8, 2, 2), &mut rng);
        let target = random_tensor(Shape::new(1, 8, 2, 2), &mut rng);
        head.forward(&m).unwrap().mse_loss(&target).unwrap().backward().unwrap();
        for p in head.parameters() {
            let grad = p.grad().expect("populated");
            assert!(grad.iter().any(|&g| g != 0.0), "{} got no signal", p.name());
        }
    }

    #[test]
    fn fit_recovers_generating_weight() {
        // Targets are plain float-mode measurements (gamma = 0 attention),
        // so the fitted auxiliary weight must approach the true sampler.
        let mut rng = DetRng::from_seed_u64(54);
        let config = SamplerConfig::new(4, 0.5, 1).unwrap();
        let sampler = SamplingLayer::<f64>::new(config, &mut rng).unwrap();
        let images = random_tensor(Shape::new(64, 1, 4, 4), &mut rng);
        let targets = sampler.sample(&images).unwrap().detach();

        let aux = AuxiliarySampler::for_sampler(&sampler);
        let trace = fit_auxiliary(&aux, &images, &targets, 1500, 2e-2).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);

        let w = sampler.latent().value();
        let w_hat = aux.weight().value();
        let err: f64 = w.iter().zip(&w_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / norm <= 0.05, "relative weight error {}", err / norm);
    }

    #[test]
    fn fit_single_block_matches_normal_equations() {
        // One filter, one 1-block image: gradient descent from the zero
        // init lands on the minimum-norm least-squares solution
        // x * y / (x . x), computed here in closed form.
        let mut rng = DetRng::from_seed_u64(55);
        let bs = 4;
        let shape = Shape::new(1, 1, bs, bs);
        let image = random_tensor(shape, &mut rng);
        let y = 0.8;
        let targets = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![y]).unwrap();

        let aux = AuxiliarySampler::<f64>::new(shape, bs);
        fit_auxiliary(&aux, &image, &targets, 4000, 2e-2).unwrap();

        let x = image.to_vec();
        let xx: f64 = x.iter().map(|v| v * v).sum();
        for (got, want) in aux.weight().value().iter().zip(x.iter().map(|v| v * y / xx)) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn fit_objective_trace_non_increasing_on_zero_targets() {
        let mut rng = DetRng::from_seed_u64(56);
        let bs = 4;
        let shape = Shape::new(2, 1, bs, bs);
        // Zero-mean images.
        let raw = random_tensor(Shape::new(8, 1, bs, bs), &mut rng);
        let mean: f64 = raw.data().iter().sum::<f64>() / raw.numel() as f64;
        let images = Tensor::from_fn(Shape::new(8, 1, bs, bs), |i| raw.data()[i] - mean);
        let targets = Tensor::zeros(Shape::new(8, 2, 1, 1));

        let aux = AuxiliarySampler::<f64>::new(shape, bs);
        // Perturb away from zero so there is something to descend.
        let noisy: Vec<f64> = (0..shape.numel()).map(|_| rng.uniform() - 0.5).collect();
        aux.weight().set_value(&noisy);
        let trace = fit_auxiliary(&aux, &images, &targets, 400, 5e-3).unwrap();
        assert!(trace.last().unwrap() <= &trace[0]);
        // The objective heads toward the subspace where measurements vanish.
        assert!(trace.last().unwrap() < &(trace[0] * 0.05));
    }

    #[test]
    fn importance_examples() {
        let shape = Shape::new(1, 1, 2, 2);
        let w = [0.3, -0.1, 0.7, 0.2];
        let same = ImportanceMap::subtract(shape, &w, &w).unwrap();
        assert!(same.values().iter().all(|&v| v == 0.0));

        let shifted: Vec<f64> = w.iter().map(|v| v + 0.25).collect();
        let plus = ImportanceMap::subtract(shape, &shifted, &w).unwrap();
        assert!(plus.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut rng = DetRng::from_seed_u64(57);
        let a: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let ab = ImportanceMap::subtract(shape, &a, &b).unwrap();
        for i in 0..4 {
            assert_eq!(ab.values()[i], a[i] - b[i]);
        }
        // Antisymmetry.
        let ba = ImportanceMap::subtract(shape, &b, &a).unwrap();
        for (x, y) in ab.values().iter().zip(ba.values()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn build_mask_examples() {
        let shape = Shape::new(1, 1, 1, 4);
        let map = ImportanceMap::subtract(shape, &[0.9, 0.1, 0.5, 0.05], &[0.0; 4]).unwrap();
        let mask = build_mask(&map, 0.5).unwrap();
        assert_eq!(mask.values(), &[1, 0, 1, 0]);

        assert_eq!(build_mask(&map, 0.0).unwrap().values(), &[1, 1, 1, 1]);

        let equal = ImportanceMap::subtract(shape, &[0.3; 4], &[0.0; 4]).unwrap();
        let mask = build_mask(&equal, 0.5).unwrap();
        assert_eq!(mask.values(), &[0, 0, 1, 1], "ties prune lowest indices first");

        assert!(build_mask(&map, 1.0).is_err());
        assert!(build_mask(&map, -0.1).is_err());
    }

    #[test]
    fn mask_is_invariant_under_positive_rescaling() {
        let mut rng = DetRng::from_seed_u64(58);
        let shape = Shape::new(1, 1, 4, 4);
        let y: Vec<f64> = (0..16).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let scaled: Vec<f64> = y.iter().map(|v| v * 37.5).collect();
        let m1 = build_mask(&ImportanceMap::subtract(shape, &y, &[0.0; 16]).unwrap(), 0.4).unwrap();
        let m2 = build_mask(&ImportanceMap::subtract(shape, &scaled, &[0.0; 16]).unwrap(), 0.4).unwrap();
        assert_eq!(m1.values(), m2.values());
    }

    proptest! {
        #[test]
        fn mask_zero_count_is_exactly_rounded(
            values in proptest::collection::vec(-1.0f64..1.0, 1..200),
            rate in 0.0f64..0.999,
        ) {
            let n = values.len();
            let shape = Shape::new(1, 1, 1, n);
            let map = ImportanceMap::subtract(shape, &values, &vec![0.0; n]).unwrap();
            let mask = build_mask(&map, rate).unwrap();
            prop_assert_eq!(mask.zero_count(), (rate * n as f64).round() as usize);
        }
    }
}
