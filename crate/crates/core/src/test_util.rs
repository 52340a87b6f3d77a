//! Shared helpers for the unit-test suites.

use crate::rng::DetRng;
use crate::tensor::{Parameter, Shape, Tensor};

/// Deterministic pseudo-random tensor with values in roughly [-1, 1].
pub(crate) fn random_tensor(shape: Shape, rng: &mut DetRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

pub(crate) fn random_param(name: &str, shape: Shape, rng: &mut DetRng) -> Parameter<f64> {
    let data = (0..shape.numel()).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    Parameter::new(name, shape, data)
}

/// Central finite-difference gradient check in double precision.
///
/// `loss_fn` must rebuild the forward graph from the current parameter
/// values on every call. Analytic gradients from one backward pass are
/// compared element by element against (L(+h) - L(-h)) / 2h.
pub(crate) fn gradcheck(params: &[Parameter<f64>], loss_fn: impl Fn() -> Tensor<f64>) {
    const STEP: f64 = 1e-3;
    const RTOL: f64 = 1e-3;
    const ATOL: f64 = 1e-6;

    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("backward");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    for (pi, p) in params.iter().enumerate() {
        let original = p.value();
        for i in 0..original.len() {
            let mut bumped = original.clone();
            bumped[i] = original[i] + STEP;
            p.set_value(&bumped);
            let up = loss_fn().item();
            bumped[i] = original[i] - STEP;
            p.set_value(&bumped);
            let down = loss_fn().item();
            p.set_value(&original);

            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[pi][i];
            let tol = (RTOL * a.abs().max(numeric.abs())).max(ATOL);
            assert!(
                (a - numeric).abs() <= tol,
                "gradient mismatch for `{}`[{}]: analytic {a}, numeric {numeric}",
                p.name(),
                i
            );
        }
    }
}
