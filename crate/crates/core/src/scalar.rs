//! Numeric abstraction that lets the controller, dynamics and rollout code
//! run either on plain `f64` or on tape variables for differentiation.
//!
//! The smoothed operations ([`Scalar::abs_smooth`], [`Scalar::sign_smooth`])
//! exist so that gradients of the l_p potential stay finite near zero
//! coordinates. Evaluation-only code paths use exact `abs`/`signum` instead;
//! the smoothing is confined to differentiated programs.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Smoothing width for `abs_smooth` and `sign_smooth`.
pub const KAPPA: f64 = 1e-8;

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Current primal value, used only for guards and diagnostics.
    fn value(self) -> f64;

    /// A constant in the same recording context as `self`.
    fn lift(self, c: f64) -> Self;

    /// `self + c` for a plain constant.
    fn addc(self, c: f64) -> Self;

    /// `self * c` for a plain constant.
    fn mulc(self, c: f64) -> Self;

    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;

    /// `self` raised to `e`. The base must be non-negative.
    fn powf(self, e: Self) -> Self;

    /// `sqrt(x^2 + KAPPA^2) - KAPPA`, a smooth stand-in for `|x|`.
    fn abs_smooth(self) -> Self;

    /// `x / sqrt(x^2 + KAPPA^2)`, a smooth stand-in for `sign(x)`.
    fn sign_smooth(self) -> Self;

    /// Dot product of two equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self;

    /// Sum of a slice (zero on empty input needs an exemplar, so the slice
    /// must be non-empty).
    fn sum(xs: &[Self]) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn lift(self, c: f64) -> f64 {
        c
    }

    #[inline]
    fn addc(self, c: f64) -> f64 {
        self + c
    }

    #[inline]
    fn mulc(self, c: f64) -> f64 {
        self * c
    }

    #[inline]
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }

    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }

    #[inline]
    fn sin(self) -> f64 {
        f64::sin(self)
    }

    #[inline]
    fn cos(self) -> f64 {
        f64::cos(self)
    }

    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }

    #[inline]
    fn powf(self, e: f64) -> f64 {
        f64::powf(self, e)
    }

    #[inline]
    fn abs_smooth(self) -> f64 {
        (self * self + KAPPA * KAPPA).sqrt() - KAPPA
    }

    #[inline]
    fn sign_smooth(self) -> f64 {
        self / (self * self + KAPPA * KAPPA).sqrt()
    }

    #[inline]
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    #[inline]
    fn sum(xs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    }
}

/// `out[i] = dot(rows[i], x)` for a row-major matrix stored as row slices.
pub fn matvec<S: Scalar>(rows: &[Vec<S>], x: &[S]) -> Vec<S> {
    rows.iter().map(|r| S::dot(r, x)).collect()
}
