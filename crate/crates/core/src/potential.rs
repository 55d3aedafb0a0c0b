//! The l_p mirror potential and its calculus.
//!
//! psi(a) = sum_i |a_i|^p + (epsilon/2) ||a||_2^2, with p > 1 and
//! epsilon >= 0. The quadratic term keeps the Hessian positive definite at
//! zero coordinates when p < 2; epsilon = 0 recovers the plain l_p norm
//! raised to the p-th power.
//!
//! Two implementations coexist deliberately. [`Potential`] works on exact
//! `f64` with true absolute values and is what evaluation rollouts and the
//! certificates use. [`psi_smooth`] and friends run on any [`Scalar`] with
//! the smoothed absolute value, so the same expressions are recordable on
//! the tape; meta-training differentiates those. At p = 2 both collapse to
//! the identical quadratic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to the base of `|x|^(p-2)` in smoothed Hessian code so the
/// power stays finite when a coordinate sits exactly at zero and p < 2.
/// Small enough that for p > 2 the floored term (~1e-20 at p = 2.2) is
/// invisible next to any epsilon, yet large enough that the worst backward
/// partial, base^(p-3) with p >= 1.05, stays below f64 overflow.
const BASE_FLOOR: f64 = 1e-100;

/// Exact-arithmetic l_p potential with quadratic smoothing weight epsilon.
#[derive(Clone, Copy, Debug)]
pub struct Potential {
    pub p: f64,
    pub epsilon: f64,
}

impl Potential {
    pub fn new(p: f64, epsilon: f64) -> Result<Potential> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "potential exponent must satisfy p > 1, got {p}"
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "potential smoothing must satisfy epsilon >= 0, got {epsilon}"
            )));
        }
        Ok(Potential { p, epsilon })
    }

    /// psi(a) = sum |a_i|^p + (epsilon/2) ||a||^2.
    pub fn value(&self, a: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &x in a {
            acc += x.abs().powf(self.p) + 0.5 * self.epsilon * x * x;
        }
        acc
    }

    /// grad_i = p sign(a_i) |a_i|^(p-1) + epsilon a_i.
    pub fn grad(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|&x| self.p * x.signum() * x.abs().powf(self.p - 1.0) + self.epsilon * x)
            .collect()
    }

    /// Diagonal of the Hessian: p (p-1) |a_i|^(p-2) + epsilon.
    ///
    /// At a zero coordinate with p < 2 the first term is +infinity; the
    /// entry is reported as infinity and it is [`Potential::inv_hess_diag`]
    /// that decides whether that is an error.
    pub fn hess_diag(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|&x| self.p * (self.p - 1.0) * x.abs().powf(self.p - 2.0) + self.epsilon)
            .collect()
    }

    /// Entrywise inverse of the Hessian diagonal.
    ///
    /// Fails only when an entry is exactly singular: epsilon = 0, p < 2 and
    /// a zero coordinate make the entry infinite, whose inverse would
    /// silently annihilate the adaptation direction. With p > 2 a zero
    /// coordinate makes the entry zero, which is equally unusable.
    pub fn inv_hess_diag(&self, a: &[f64]) -> Result<Vec<f64>> {
        let h = self.hess_diag(a);
        let mut out = Vec::with_capacity(h.len());
        for (i, &hi) in h.iter().enumerate() {
            if !hi.is_finite() || hi <= 0.0 {
                return Err(Error::SingularHessian {
                    index: i,
                    p: self.p,
                });
            }
            out.push(1.0 / hi);
        }
        Ok(out)
    }

    /// Bregman divergence d_psi(y || x) = psi(y) - psi(x) - (y-x)' grad(x).
    pub fn bregman(&self, y: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), x.len());
        let gx = self.grad(x);
        let mut acc = self.value(y) - self.value(x);
        for i in 0..x.len() {
            acc -= (y[i] - x[i]) * gx[i];
        }
        acc
    }
}

/// Smoothed psi on any scalar: |x| is replaced by its smooth surrogate.
pub fn psi_smooth<S: Scalar>(a: &[S], p: S, epsilon: f64) -> S {
    let mut acc = a[0].lift(0.0);
    for &x in a {
        let ax = x.abs_smooth();
        acc = acc + ax.powf(p) + (x * x).mulc(0.5 * epsilon);
    }
    acc
}

/// Smoothed gradient coordinate: p sign(x) |x|^(p-1) + epsilon x.
pub fn psi_grad_smooth<S: Scalar>(x: S, p: S, epsilon: f64) -> S {
    p * x.sign_smooth() * x.abs_smooth().powf(p.addc(-1.0)) + x.mulc(epsilon)
}

/// Smoothed Hessian diagonal entry: p (p-1) |x|^(p-2) + epsilon.
///
/// The base of the power is floored at [`BASE_FLOOR`] so it stays finite
/// for p < 2 at exact zeros; the adaptation law divides by this entry, and
/// the floor turns an infinite entry into a huge one (a frozen coordinate)
/// instead of poisoning the tape.
pub fn psi_hess_smooth<S: Scalar>(x: S, p: S, epsilon: f64) -> S {
    let base = (x * x).addc(BASE_FLOOR * BASE_FLOOR).sqrt();
    (p * p.addc(-1.0) * base.powf(p.addc(-2.0))).addc(epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, value_and_grad};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn value_grad_hess_at_worked_point() {
        // p = 3, epsilon = 0, a = [1, -2]:
        // psi = 1 + 8 = 9, grad = [3, -12], hess = [6, 12].
        let pot = Potential::new(3.0, 0.0).unwrap();
        let a = [1.0, -2.0];
        assert_eq!(pot.value(&a), 9.0);
        assert_eq!(pot.grad(&a), vec![3.0, -12.0]);
        assert_eq!(pot.hess_diag(&a), vec![6.0, 12.0]);
        assert_eq!(pot.inv_hess_diag(&a).unwrap(), vec![1.0 / 6.0, 1.0 / 12.0]);
    }

    #[test]
    fn quadratic_case_is_exact() {
        // p = 2, epsilon = 0: psi = ||a||^2, grad = 2a, hess = 2I.
        let pot = Potential::new(2.0, 0.0).unwrap();
        let a = [0.5, 0.0, -3.0];
        assert_eq!(pot.value(&a), 9.25);
        assert_eq!(pot.grad(&a), vec![1.0, 0.0, -6.0]);
        assert_eq!(pot.hess_diag(&a), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn smoothing_regularizes_zero_coordinates() {
        // p = 2.2, epsilon = 1e-3 at a = 0: hess entry is
        // p (p-1) 0^0.2 + epsilon = epsilon.
        let pot = Potential::new(2.2, 1e-3).unwrap();
        let h = pot.hess_diag(&[0.0]);
        assert_eq!(h, vec![1e-3]);
        assert_eq!(pot.inv_hess_diag(&[0.0]).unwrap(), vec![1e3]);
    }

    #[test]
    fn singular_hessian_is_an_error() {
        let pot = Potential::new(1.5, 0.0).unwrap();
        let err = pot.inv_hess_diag(&[1.0, 0.0]).unwrap_err();
        match err {
            Error::SingularHessian { index, p } => {
                assert_eq!(index, 1);
                assert_eq!(p, 1.5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn exponent_must_exceed_one() {
        assert!(Potential::new(1.0, 0.0).is_err());
        assert!(Potential::new(0.5, 1e-3).is_err());
        assert!(Potential::new(f64::NAN, 0.0).is_err());
        assert!(Potential::new(2.0, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(p, eps) in &[(1.1, 0.0), (1.1, 1e-3), (2.0, 0.0), (2.2, 1e-3), (3.0, 0.0)] {
            let pot = Potential::new(p, eps).unwrap();
            let a = [0.8, -1.3, 2.1, -0.4];
            let h = 1e-6;
            let g = pot.grad(&a);
            for i in 0..a.len() {
                let mut ap = a;
                let mut am = a;
                ap[i] += h;
                am[i] -= h;
                let fd = (pot.value(&ap) - pot.value(&am)) / (2.0 * h);
                assert!(close(g[i], fd, 1e-6), "p={p} i={i}: {} vs {}", g[i], fd);
            }
        }
    }

    #[test]
    fn hess_diag_matches_grad_finite_differences() {
        for &(p, eps) in &[(1.1, 1e-3), (2.0, 0.0), (2.2, 0.0), (3.0, 1e-3)] {
            let pot = Potential::new(p, eps).unwrap();
            let a = [0.9, -1.7, 0.3];
            let h = 1e-6;
            let hd = pot.hess_diag(&a);
            for i in 0..a.len() {
                let mut ap = a;
                let mut am = a;
                ap[i] += h;
                am[i] -= h;
                let fd = (pot.grad(&ap)[i] - pot.grad(&am)[i]) / (2.0 * h);
                assert!(close(hd[i], fd, 1e-5), "p={p} i={i}: {} vs {}", hd[i], fd);
            }
        }
    }

    #[test]
    fn bregman_of_quadratic_is_squared_distance() {
        // p = 2, epsilon = 0: d_psi(y||x) = ||y - x||^2.
        let pot = Potential::new(2.0, 0.0).unwrap();
        let y = [1.0, -2.0, 0.5];
        let x = [0.0, 1.0, 0.25];
        let want = 1.0 + 9.0 + 0.0625;
        assert!((pot.bregman(&y, &x) - want).abs() < 1e-14);
    }

    #[test]
    fn smooth_paths_match_exact_at_p2() {
        // With p = 2 every |.|^(p-2) power is the constant one, so the
        // smoothed and exact formulas agree to the last bit away from zero
        // and the Hessian is exactly 2 + epsilon even at zero.
        let pot = Potential::new(2.0, 1e-3).unwrap();
        let a = [0.7, -0.2, 0.0, 3.0];
        let p2 = 2.0f64;
        for (i, &x) in a.iter().enumerate() {
            let hs: f64 = psi_hess_smooth(x, p2, 1e-3);
            assert_eq!(hs, pot.hess_diag(&a)[i]);
        }
    }

    #[test]
    fn smooth_gradient_is_differentiable_on_tape() {
        // d/dx of the smoothed gradient must match FD, including through
        // the exponent, for a representative spread of (p, x).
        for &(p, x) in &[(1.1, 0.4), (2.0, -0.9), (2.2, 1.5), (3.0, -0.05)] {
            let err = grad_check(&[x, p], 1e-6, |_, v| psi_grad_smooth(v[0], v[1], 1e-3)).unwrap();
            assert!(err < 1e-6, "p={p} x={x}: rel err {err:e}");
        }
    }

    #[test]
    fn smooth_psi_value_and_grad_on_tape_match_exact() {
        let pot = Potential::new(2.7, 1e-3).unwrap();
        let a = [0.6, -1.1, 0.9];
        let (v, g) = value_and_grad(&a, |_, vars| {
            let p = vars[0].lift(2.7);
            psi_smooth(vars, p, 1e-3)
        })
        .unwrap();
        // The smoothed absolute value sits O(kappa) = O(1e-8) below the
        // exact one, which bounds the disagreement here.
        assert!(close(v, pot.value(&a), 1e-7));
        let ge = pot.grad(&a);
        for i in 0..3 {
            assert!(close(g[i], ge[i], 1e-7), "{} vs {}", g[i], ge[i]);
        }
    }

    proptest! {
        /// Bregman divergence of a strictly convex potential is nonnegative
        /// and zero exactly on the diagonal.
        #[test]
        fn bregman_nonnegative(
            p in 1.05f64..4.0,
            eps in prop::sample::select(vec![0.0, 1e-3, 1e-1]),
            y in prop::collection::vec(-5.0f64..5.0, 3),
            x in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let pot = Potential::new(p, eps).unwrap();
            let d = pot.bregman(&y, &x);
            prop_assert!(d >= -1e-12, "d = {d}");
            let dxx = pot.bregman(&x, &x);
            prop_assert!(dxx.abs() <= 1e-12, "diagonal d = {dxx}");
        }

        /// grad is odd and value is even under sign flips.
        #[test]
        fn symmetry_under_sign_flip(
            p in 1.05f64..4.0,
            a in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let pot = Potential::new(p, 1e-3).unwrap();
            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            prop_assert!((pot.value(&a) - pot.value(&neg)).abs() < 1e-10);
            let g = pot.grad(&a);
            let gn = pot.grad(&neg);
            for i in 0..a.len() {
                prop_assert!((g[i] + gn[i]).abs() < 1e-10);
            }
        }
    }
}
