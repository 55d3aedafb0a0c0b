//! Twice-differentiable reference trajectories.
//!
//! Training references are random walks joined by natural cubic splines;
//! evaluation uses the analytic double-loop curve. Every reference answers
//! (q_r, q'_r, q''_r) at any t in [0, T]; queries are clamped to the horizon.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub trait Reference {
    /// (q_r(t), q'_r(t), q''_r(t)).
    fn eval(&self, t: f64) -> ([f64; 3], [f64; 3], [f64; 3]);
    fn horizon(&self) -> f64;
}

/// x = A sin(wt), y = B(1 - cos(wt)), phi = 0, with w = 4 pi / T: the
/// circle of the x-y plane traversed twice over [0, T].
#[derive(Clone, Copy, Debug)]
pub struct DoubleLoop {
    pub t_total: f64,
    pub a: f64,
    pub b: f64,
}

impl DoubleLoop {
    pub fn new(t_total: f64) -> DoubleLoop {
        DoubleLoop {
            t_total,
            a: 1.0,
            b: 1.0,
        }
    }

    fn omega(&self) -> f64 {
        4.0 * std::f64::consts::PI / self.t_total
    }
}

impl Reference for DoubleLoop {
    fn eval(&self, t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let w = self.omega();
        let (s, c) = (w * t).sin_cos();
        let q = [self.a * s, self.b * (1.0 - c), 0.0];
        let qd = [self.a * w * c, self.b * w * s, 0.0];
        let qdd = [-self.a * w * w * s, self.b * w * w * c, 0.0];
        (q, qd, qdd)
    }

    fn horizon(&self) -> f64 {
        self.t_total
    }
}

/// Constant set-point; derivatives are zero.
#[derive(Clone, Copy, Debug)]
pub struct Hover {
    pub q: [f64; 3],
    pub t_total: f64,
}

impl Reference for Hover {
    fn eval(&self, _t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        (self.q, [0.0; 3], [0.0; 3])
    }

    fn horizon(&self) -> f64 {
        self.t_total
    }
}

/// Waypoint spacing of random-walk references, in seconds.
pub const WAYPOINT_SPACING: f64 = 1.0;
/// Standard deviation of one random-walk step, in meters.
pub const WAYPOINT_STEP: f64 = 0.8;

/// Random-walk spline covering at least `[0, t_total]` with the shared
/// spacing and step scale.
pub fn random_walk_reference(seed: u64, t_total: f64) -> Result<Spline> {
    let count = ((t_total / WAYPOINT_SPACING).ceil() as usize + 1).max(2);
    let waypoints = random_walk_waypoints(seed, count, WAYPOINT_STEP);
    spline_fit(&waypoints, WAYPOINT_SPACING)
}

/// Random-walk waypoints starting at the origin: w_{k+1} = w_k plus a
/// step_scale-scaled standard normal per coordinate, phi pinned to zero.
pub fn random_walk_waypoints(seed: u64, count: usize, step_scale: f64) -> Vec<[f64; 3]> {
    assert!(count >= 2, "need at least two waypoints");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = [0.0f64; 3];
    let mut out = vec![w];
    for _ in 1..count {
        for wi in w.iter_mut().take(2) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *wi += step_scale * z;
        }
        out.push(w);
    }
    out
}

/// Natural cubic spline through uniformly spaced waypoints, one spline per
/// coordinate: C^2, interpolating, with zero curvature at both ends.
#[derive(Clone, Debug)]
pub struct Spline {
    /// Knot values per coordinate.
    y: Vec<[f64; 3]>,
    /// Knot second derivatives per coordinate.
    m: Vec<[f64; 3]>,
    h: f64,
}

pub fn spline_fit(waypoints: &[[f64; 3]], waypoint_spacing: f64) -> Result<Spline> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidConfig(
            "spline needs at least two waypoints".into(),
        ));
    }
    if !(waypoint_spacing > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "waypoint spacing must be positive (got {waypoint_spacing}); \
             zero spacing would duplicate knot times"
        )));
    }
    let n = waypoints.len();
    let h = waypoint_spacing;
    let mut m = vec![[0.0f64; 3]; n];
    if n > 2 {
        // Thomas solve of m_{k-1} + 4 m_k + m_{k+1} = 6 (y_{k-1} - 2y_k +
        // y_{k+1}) / h^2 for the interior knots, natural ends m = 0.
        let interior = n - 2;
        for coord in 0..3 {
            let mut diag = vec![4.0f64; interior];
            let mut rhs = vec![0.0f64; interior];
            for k in 0..interior {
                let (ym, y0, yp) = (
                    waypoints[k][coord],
                    waypoints[k + 1][coord],
                    waypoints[k + 2][coord],
                );
                rhs[k] = 6.0 * (ym - 2.0 * y0 + yp) / (h * h);
            }
            for k in 1..interior {
                let f = 1.0 / diag[k - 1];
                diag[k] -= f;
                rhs[k] -= f * rhs[k - 1];
            }
            let mut sol = vec![0.0f64; interior];
            sol[interior - 1] = rhs[interior - 1] / diag[interior - 1];
            for k in (0..interior - 1).rev() {
                sol[k] = (rhs[k] - sol[k + 1]) / diag[k];
            }
            for k in 0..interior {
                m[k + 1][coord] = sol[k];
            }
        }
    }
    Ok(Spline {
        y: waypoints.to_vec(),
        m,
        h,
    })
}

impl Reference for Spline {
    fn eval(&self, t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let t = t.clamp(0.0, self.horizon());
        let k = ((t / self.h) as usize).min(self.y.len() - 2);
        let dt = t - k as f64 * self.h;
        let h = self.h;
        let mut q = [0.0; 3];
        let mut qd = [0.0; 3];
        let mut qdd = [0.0; 3];
        for c in 0..3 {
            let (y0, y1) = (self.y[k][c], self.y[k + 1][c]);
            let (m0, m1) = (self.m[k][c], self.m[k + 1][c]);
            let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
            let d = (m1 - m0) / (6.0 * h);
            q[c] = y0 + b * dt + 0.5 * m0 * dt * dt + d * dt * dt * dt;
            qd[c] = b + m0 * dt + 3.0 * d * dt * dt;
            qdd[c] = m0 + 6.0 * d * dt;
        }
        (q, qd, qdd)
    }

    fn horizon(&self) -> f64 {
        (self.y.len() - 1) as f64 * self.h
    }
}

/// Writes a reference sampled at `dt` as CSV (t, q_r, q'_r, q''_r columns).
pub fn write_reference_csv<R: Reference, W: Write>(r: &R, dt: f64, mut out: W) -> Result<()> {
    writeln!(out, "t,xr,yr,phir,xrdot,yrdot,phirdot,xrddot,yrddot,phirddot")?;
    let n = (r.horizon() / dt).round() as usize;
    for k in 0..=n {
        let t = k as f64 * dt;
        let (q, qd, qdd) = r.eval(t);
        writeln!(
            out,
            "{t:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            q[0], q[1], q[2], qd[0], qd[1], qd[2], qdd[0], qdd[1], qdd[2]
        )?;
    }
    Ok(())
}

/// Finite-difference C^2 consistency defect of a reference on a uniform
/// 1000-point-style grid: how far central differences of q_r and q'_r sit
/// from the reported q'_r and q''_r. The grid is staggered halfway between
/// the usual sample points so that spline knots, where the third derivative
/// jumps and centered differences lose an order, are never hit exactly;
/// continuity across knots has its own test.
pub fn c2_defect<R: Reference>(r: &R, points: usize) -> (f64, f64) {
    let h = 1e-4;
    let t_end = r.horizon();
    let mut worst_v = 0.0f64;
    let mut worst_a = 0.0f64;
    for k in 0..points {
        let t = t_end * (k as f64 + 0.5) / points as f64;
        if t < h || t > t_end - h {
            continue;
        }
        let (_, qd, qdd) = r.eval(t);
        let (qp, qdp, _) = r.eval(t + h);
        let (qm, qdm, _) = r.eval(t - h);
        for c in 0..3 {
            worst_v = worst_v.max(((qp[c] - qm[c]) / (2.0 * h) - qd[c]).abs());
            worst_a = worst_a.max(((qdp[c] - qdm[c]) / (2.0 * h) - qdd[c]).abs());
        }
    }
    (worst_v, worst_a)
}
