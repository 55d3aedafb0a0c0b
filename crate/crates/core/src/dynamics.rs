//! Manipulator-equation plants: M(q)q'' + C(q,q')q' + g(q) = tau(u) + f_ext.
//!
//! The only shipped plant is the fully actuated planar quadrotor (n = m = 3,
//! state q = (x, y, phi)), plus the quadratic wind-drag disturbance acting on
//! it and a synthetic linearly parameterized disturbance with known features
//! for exact-tracking tests. The [`Manipulator`] trait keeps the general
//! structure visible and testable; tape-differentiable code paths use the
//! free generic functions below, which hardcode the quadrotor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gravitational constant, with the sign convention g(q) = [0, -g, 0]'.
pub const G_CONST: f64 = -9.81;

/// Gravity vector of the quadrotor: [0, 9.81, 0]'.
pub const GRAVITY: [f64; 3] = [0.0, -G_CONST, 0.0];

/// A manipulator-equation system with three generalized coordinates.
pub trait Manipulator {
    fn mass(&self, q: &[f64; 3]) -> [[f64; 3]; 3];
    fn coriolis(&self, q: &[f64; 3], qd: &[f64; 3]) -> [[f64; 3]; 3];
    fn gravity(&self, q: &[f64; 3]) -> [f64; 3];
    /// Generalized force produced by input u at configuration q.
    fn tau(&self, q: &[f64; 3], u: &[f64; 3]) -> [f64; 3];
    /// Input realizing a desired generalized force (full actuation).
    fn tau_inverse(&self, q: &[f64; 3], f: &[f64; 3]) -> [f64; 3];

    /// Solves M q'' = tau(u) + f_ext - C q' - g for q''.
    fn accel(&self, q: &[f64; 3], qd: &[f64; 3], u: &[f64; 3], f_ext: &[f64; 3]) -> Result<[f64; 3]> {
        let c = self.coriolis(q, qd);
        let g = self.gravity(q);
        let t = self.tau(q, u);
        let mut rhs = [0.0; 3];
        for i in 0..3 {
            let cqd = c[i][0] * qd[0] + c[i][1] * qd[1] + c[i][2] * qd[2];
            rhs[i] = t[i] + f_ext[i] - cqd - g[i];
        }
        solve3(self.mass(q), rhs)
    }
}

/// 3x3 linear solve by Gaussian elimination with partial pivoting.
pub fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<[f64; 3]> {
    let mut m = a;
    let mut x = b;
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col].abs() < 1e-12 {
            return Err(Error::SingularMass {
                row: col,
                pivot: m[piv][col],
            });
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..3 {
                m[r][c] -= f * m[col][c];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..3).rev() {
        for r in 0..col {
            x[r] -= m[r][col] / m[col][col] * x[col];
            m[r][col] = 0.0;
        }
        x[col] /= m[col][col];
    }
    Ok(x)
}

/// The fully actuated planar quadrotor: M = I, C = 0, g = [0, 9.81, 0]',
/// tau(u) = R(phi) u with R a rotation about the body axis.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlanarQuadrotor;

impl Manipulator for PlanarQuadrotor {
    fn mass(&self, _q: &[f64; 3]) -> [[f64; 3]; 3] {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn coriolis(&self, _q: &[f64; 3], _qd: &[f64; 3]) -> [[f64; 3]; 3] {
        [[0.0; 3]; 3]
    }

    fn gravity(&self, _q: &[f64; 3]) -> [f64; 3] {
        GRAVITY
    }

    fn tau(&self, q: &[f64; 3], u: &[f64; 3]) -> [f64; 3] {
        quad_tau(q[2], *u)
    }

    fn tau_inverse(&self, q: &[f64; 3], f: &[f64; 3]) -> [f64; 3] {
        quad_tau_inverse(q[2], *f)
    }

    fn accel(&self, q: &[f64; 3], qd: &[f64; 3], u: &[f64; 3], f_ext: &[f64; 3]) -> Result<[f64; 3]> {
        let _ = qd;
        Ok(quad_accel(*q, *u, *f_ext))
    }
}

/// tau(u) = R(phi) u, rotating the first two input components.
pub fn quad_tau<S: Scalar>(phi: S, u: [S; 3]) -> [S; 3] {
    let (c, s) = (phi.cos(), phi.sin());
    [c * u[0] - s * u[1], s * u[0] + c * u[1], u[2]]
}

/// u = R(phi)' f; the rotation is orthogonal so this inverts [`quad_tau`].
pub fn quad_tau_inverse<S: Scalar>(phi: S, f: [S; 3]) -> [S; 3] {
    let (c, s) = (phi.cos(), phi.sin());
    [c * f[0] + s * f[1], -(s * f[0]) + c * f[1], f[2]]
}

/// Quadrotor acceleration: q'' = R(phi)u + f_ext - [0, 9.81, 0]'.
pub fn quad_accel<S: Scalar>(q: [S; 3], u: [S; 3], f_ext: [S; 3]) -> [S; 3] {
    let t = quad_tau(q[2], u);
    [
        t[0] + f_ext[0],
        t[1] + f_ext[1] + f_ext[1].lift(G_CONST),
        t[2] + f_ext[2],
    ]
}

/// Quadratic drag from a horizontal wind of speed w.
#[derive(Clone, Copy, Debug)]
pub struct WindDrag {
    pub w: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl WindDrag {
    pub fn new(w: f64) -> WindDrag {
        WindDrag {
            w,
            beta1: 0.1,
            beta2: 1.0,
        }
    }
}

/// Exact drag force (N/kg): body-frame relative airspeed components
/// v1 = (x' - w)cos(phi) + y' sin(phi), v2 = -(x' - w)sin(phi) + y' cos(phi),
/// projected back through -R~ [beta1 v1|v1|; beta2 v2|v2|].
pub fn wind_drag(q: &[f64; 3], qd: &[f64; 3], wd: &WindDrag) -> [f64; 3] {
    let (c, s) = (q[2].cos(), q[2].sin());
    let rx = qd[0] - wd.w;
    let v1 = rx * c + qd[1] * s;
    let v2 = -rx * s + qd[1] * c;
    let d1 = wd.beta1 * v1 * v1.abs();
    let d2 = wd.beta2 * v2 * v2.abs();
    [-(c * d1 - s * d2), -(s * d1 + c * d2), 0.0]
}

/// Tape-safe drag with `|v|` smoothed; agrees with [`wind_drag`] to O(1e-8).
pub fn wind_drag_smooth<S: Scalar>(q: [S; 3], qd: [S; 3], wd: &WindDrag) -> [S; 3] {
    let (c, s) = (q[2].cos(), q[2].sin());
    let rx = qd[0].addc(-wd.w);
    let v1 = rx * c + qd[1] * s;
    let v2 = qd[1] * c - rx * s;
    let d1 = (v1 * v1.abs_smooth()).mulc(wd.beta1);
    let d2 = (v2 * v2.abs_smooth()).mulc(wd.beta2);
    let zero = c.lift(0.0);
    [s * d2 - c * d1, -(s * d1 + c * d2), zero]
}

/// Synthetic disturbance f(q, q') = Y(q, q') a with a known bounded feature
/// map: random-Fourier sines and cosines of projections of (q, q'). Exists
/// so exact-feature (delta = 0) tracking claims have a testable instance.
#[derive(Clone, Debug)]
pub struct OracleDisturbance {
    /// One 6-vector of frequencies per matrix entry, row-major 3 x d.
    freqs: Vec<[f64; 6]>,
    pub a: Vec<f64>,
    pub d: usize,
}

impl OracleDisturbance {
    /// Frequencies ~ N(0,1); true parameter a ~ a_scale N(0,1) per entry.
    pub fn new(seed: u64, d: usize, a_scale: f64) -> OracleDisturbance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs = (0..3 * d)
            .map(|_| {
                let mut f = [0.0; 6];
                for fi in &mut f {
                    *fi = StandardNormal.sample(&mut rng);
                }
                f
            })
            .collect();
        let a = (0..d)
            .map(|_| a_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        OracleDisturbance { freqs, a, d }
    }

    /// Y(q, q'): entries sin(w.z) in even columns, cos(w.z) in odd ones,
    /// all in [-1, 1].
    pub fn features(&self, q: &[f64; 3], qd: &[f64; 3]) -> Vec<Vec<f64>> {
        let z = [q[0], q[1], q[2], qd[0], qd[1], qd[2]];
        (0..3)
            .map(|i| {
                (0..self.d)
                    .map(|j| {
                        let w = &self.freqs[i * self.d + j];
                        let dot: f64 = (0..6).map(|k| w[k] * z[k]).sum();
                        if j % 2 == 0 {
                            dot.sin()
                        } else {
                            dot.cos()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// f = Y(q, q') a.
    pub fn value(&self, q: &[f64; 3], qd: &[f64; 3]) -> [f64; 3] {
        let y = self.features(q, qd);
        let mut f = [0.0; 3];
        for i in 0..3 {
            f[i] = <f64 as Scalar>::dot(&y[i], &self.a);
        }
        f
    }
}

/// Asserts the skew-symmetry of Mdot - 2C along a sampled configuration
/// path, finite-differencing M. Returns the worst symmetric-part norm.
pub fn skew_symmetry_defect<M, F>(model: &M, path: F, ts: &[f64]) -> f64
where
    M: Manipulator,
    F: Fn(f64) -> ([f64; 3], [f64; 3]),
{
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &t in ts {
        let (q, qd) = path(t);
        let (qp, _) = path(t + h);
        let (qm, _) = path(t - h);
        let (mp, mm) = (model.mass(&qp), model.mass(&qm));
        let c = model.coriolis(&q, &qd);
        let mut frob = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mdot_ij = (mp[i][j] - mm[i][j]) / (2.0 * h);
                let mdot_ji = (mp[j][i] - mm[j][i]) / (2.0 * h);
                let aij = (mdot_ij - 2.0 * c[i][j]) + (mdot_ji - 2.0 * c[j][i]);
                frob += aij * aij;
            }
        }
        worst = worst.max(frob.sqrt());
    }
    worst
}
