//! Scalar activation functions and their derivatives.
//!
//! FitReLU is `max(0, x - x * s(k (x - λ)))` with `s` the logistic function,
//! which equals `max(0, x * s(k (λ - x)))`: close to `x` below the bound and
//! decaying to zero above it. As `k` grows it approaches the hard per-neuron
//! bound of [`fitrelu_naive`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beyond this magnitude of `k (x - λ)` the logistic gate is taken as exactly
/// 0 or 1.
pub const GATE_SATURATION: f64 = 50.0;

/// Behaviour of a globally bounded ReLU above its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbMode {
    /// Values above the bound become 0.
    SquashToZero,
    /// Values above the bound are truncated to the bound.
    ClampToBound,
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn check_bound(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("activation bound must be positive, got {lambda}")))
    }
}

pub fn gbrelu(x: f64, lambda: f64, mode: GbMode) -> Result<f64> {
    check_bound(lambda)?;
    Ok(gbrelu_raw(x, lambda, mode))
}

/// [`gbrelu`] without bound validation. A faulted bound may be non-positive,
/// in which case squash mode zeroes everything and clamp mode clamps to it.
#[inline]
pub fn gbrelu_raw(x: f64, lambda: f64, mode: GbMode) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    match mode {
        GbMode::SquashToZero => {
            if x > lambda {
                0.0
            } else {
                x
            }
        }
        GbMode::ClampToBound => x.min(lambda).max(0.0),
    }
}

pub fn fitrelu_naive(x: f64, lambda: f64) -> Result<f64> {
    check_bound(lambda)?;
    Ok(gbrelu_raw(x, lambda, GbMode::SquashToZero))
}

/// Logistic gate `1 / (1 + e^{-z})`, saturated outside `±GATE_SATURATION`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z > GATE_SATURATION {
        1.0
    } else if z < -GATE_SATURATION {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

/// Trainable per-neuron bounded ReLU with slope `k`.
#[inline]
pub fn fitrelu(x: f64, lambda: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    // x - x * s(k(x - λ)), written as x * s(k(λ - x)) to avoid cancellation.
    x * logistic(k * (lambda - x))
}

/// `∂ fitrelu / ∂λ`. Zero wherever the outer max is inactive.
#[inline]
pub fn fitrelu_grad_lambda(x: f64, lambda: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = logistic(k * (lambda - x));
    x * k * s * (1.0 - s)
}

/// `∂ fitrelu / ∂x`. Zero wherever the outer max is inactive (subgradient 0
/// at the kink).
#[inline]
pub fn fitrelu_grad_x(x: f64, lambda: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = logistic(k * (lambda - x));
    s - x * k * s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(3.5), 3.5);
    }

    #[test]
    fn gbrelu_examples() {
        assert_eq!(gbrelu(5.0, 3.0, GbMode::SquashToZero).unwrap(), 0.0);
        assert_eq!(gbrelu(5.0, 3.0, GbMode::ClampToBound).unwrap(), 3.0);
        assert_eq!(gbrelu(2.0, 3.0, GbMode::SquashToZero).unwrap(), 2.0);
        assert_eq!(gbrelu(2.0, 3.0, GbMode::ClampToBound).unwrap(), 2.0);
        assert_eq!(gbrelu(-1.0, 3.0, GbMode::ClampToBound).unwrap(), 0.0);
        assert!(matches!(gbrelu(1.0, 0.0, GbMode::SquashToZero), Err(Error::Config(_))));
        assert!(gbrelu(1.0, -2.0, GbMode::ClampToBound).is_err());
    }

    #[test]
    fn naive_examples() {
        let l = 1.25;
        assert_eq!(fitrelu_naive(l, l).unwrap(), l);
        assert_eq!(fitrelu_naive(l + 1e-9, l).unwrap(), 0.0);
        assert_eq!(fitrelu_naive(-1.0, l).unwrap(), 0.0);
        assert!(fitrelu_naive(1.0, 0.0).is_err());
    }

    #[test]
    fn fitrelu_examples() {
        assert_eq!(fitrelu(0.0, 2.0, 10.0), 0.0);
        assert_eq!(fitrelu(2.0, 2.0, 10.0), 1.0);
        assert_eq!(fitrelu(0.75, 0.75, 3.0), 0.375);
        // Far above the bound the gate closes: 10 * s(20 * (2 - 10)).
        let v = fitrelu(10.0, 2.0, 20.0);
        assert_eq!(v, 0.0);
        // Well below the bound the gate is open: 0.5 * s(20 * 1.5) = 0.5 * (1 - 9.4e-14).
        let v = fitrelu(0.5, 2.0, 20.0);
        let expected = 0.5 / (1.0 + (-30.0f64).exp());
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(fitrelu_grad_lambda(0.0, 1.0, 10.0), 0.0);
        let (l, k) = (1.5, 8.0);
        assert!((fitrelu_grad_lambda(l, l, k) - l * k / 4.0).abs() < 1e-12);
        assert_eq!(fitrelu_grad_x(-50.0, 1.0, 10.0), 0.0);
        assert!((fitrelu_grad_x(0.01, 100.0, 50.0) - 1.0).abs() < 1e-9);
        assert!(fitrelu_grad_x(30.0, 1.0, 50.0).abs() < 1e-9);
    }

    fn central(f: impl Fn(f64) -> f64, at: f64, h: f64) -> f64 {
        (f(at + h) - f(at - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn bounded_between_zero_and_relu(x in -100.0f64..100.0, l in 0.01f64..50.0, k in 0.1f64..100.0) {
            let y = fitrelu(x, l, k);
            prop_assert!(y >= 0.0);
            prop_assert!(y <= relu(x));
        }

        #[test]
        fn gbrelu_ranges(x in -100.0f64..100.0, l in 0.01f64..50.0) {
            let s = gbrelu(x, l, GbMode::SquashToZero).unwrap();
            if x <= 0.0 || x > l { prop_assert_eq!(s, 0.0); } else { prop_assert_eq!(s, x); }
            let c = gbrelu(x, l, GbMode::ClampToBound).unwrap();
            prop_assert!((0.0..=l).contains(&c));
        }

        #[test]
        fn analytic_gradients_match_finite_differences(
            x in 0.01f64..10.0, l in 0.1f64..10.0, k in 0.5f64..20.0,
        ) {
            let h = 1e-5;
            let gl = fitrelu_grad_lambda(x, l, k);
            let fd = central(|v| fitrelu(x, v, k), l, h);
            prop_assert!((gl - fd).abs() / (gl.abs() + 1e-8) < 1e-4 || (gl - fd).abs() < 1e-9);
            let gx = fitrelu_grad_x(x, l, k);
            let fd = central(|v| fitrelu(v, l, k), x, h);
            prop_assert!((gx - fd).abs() / (gx.abs() + 1e-8) < 1e-4 || (gx - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn converges_to_naive_as_slope_grows() {
        let l = 2.0;
        for &x in &[-1.0, 0.5, 1.9, 2.05, 3.0, 10.0] {
            let mut prev = f64::INFINITY;
            for k in [10.0, 100.0, 1000.0] {
                let d = (fitrelu(x, l, k) - fitrelu_naive(x, l).unwrap()).abs();
                assert!(d <= prev, "x={x} k={k}");
                prev = d;
            }
            assert!(prev < 1e-3);
        }
    }

    #[test]
    fn approaches_relu_for_huge_bound() {
        let mut x = -100.0;
        while x <= 100.0 {
            assert!((fitrelu(x, 1e6, 10.0) - relu(x)).abs() < 1e-6);
            x += 0.37;
        }
    }
}
