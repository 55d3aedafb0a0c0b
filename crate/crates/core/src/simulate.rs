//! Closed-loop rollouts: classical RK4 on the augmented state (q, q',
//! a-hat, accumulated loss integrands), trajectory recording, the loss
//! functionals, and the trajectory CSV format.
//!
//! The integrator is generic over [`Scalar`], so the same stepping code
//! produces plain evaluation trajectories and tape-recorded losses that
//! meta-training differentiates end to end.

use std::io::{BufRead, Write};

use crate::controller::{adaptation_rhs_smooth, md_control_quad, sliding, Gains};
use crate::dynamics::quad_accel;
use crate::error::{Error, Result};
use crate::reference::Reference;
use crate::scalar::Scalar;

use serde::{Deserialize, Serialize};

/// Infinity-norm bound on the augmented state beyond which a rollout is
/// declared divergent. Early meta-training can destabilize the loop; a
/// clean error beats NaN propagation.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Controller decoded to rollout-ready scalars. On a tape every field the
/// meta-learner tunes is a recorded variable; evaluation instantiates the
/// same struct at plain f64.
#[derive(Clone, Debug)]
pub struct MdGains<S> {
    pub lambda: [S; 3],
    pub k: [S; 3],
    pub p_diag: Vec<S>,
    pub p_exp: S,
    pub epsilon: f64,
}

impl MdGains<f64> {
    pub fn from_gains(g: &Gains, p_exp: f64, epsilon: f64) -> MdGains<f64> {
        MdGains {
            lambda: g.lambda(),
            k: g.k(),
            p_diag: g.p_diag(),
            p_exp,
            epsilon,
        }
    }

    /// No adaptation: d = 0, so the feature term never enters the loop.
    pub fn nominal(lambda: [f64; 3], k: [f64; 3]) -> MdGains<f64> {
        MdGains {
            lambda,
            k,
            p_diag: Vec::new(),
            p_exp: 2.0,
            epsilon: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.p_diag.len()
    }
}

/// Provenance carried by a recorded trajectory: which disturbance produced
/// it, the seed, and the controller it ran under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub source: String,
    pub seed: u64,
    pub lambda: [f64; 3],
    pub k: [f64; 3],
    pub p_diag: Vec<f64>,
    pub p_exp: f64,
    pub epsilon: f64,
}

impl TrajectoryMeta {
    pub fn new(source: impl Into<String>, seed: u64, g: &MdGains<f64>) -> TrajectoryMeta {
        TrajectoryMeta {
            source: source.into(),
            seed,
            lambda: g.lambda,
            k: g.k,
            p_diag: g.p_diag.clone(),
            p_exp: g.p_exp,
            epsilon: g.epsilon,
        }
    }

    /// Metadata for a run without the MD controller (PID data collection).
    pub fn bare(source: impl Into<String>, seed: u64) -> TrajectoryMeta {
        TrajectoryMeta {
            source: source.into(),
            seed,
            lambda: [0.0; 3],
            k: [0.0; 3],
            p_diag: Vec::new(),
            p_exp: 2.0,
            epsilon: 0.0,
        }
    }
}

/// Uniformly sampled closed-loop trajectory, one entry per sample time
/// k dt for k = 0..=N, plus the accumulated loss integrands at T.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub q: Vec<[f64; 3]>,
    pub qd: Vec<[f64; 3]>,
    pub ahat: Vec<Vec<f64>>,
    pub u: Vec<[f64; 3]>,
    pub q_r: Vec<[f64; 3]>,
    pub qd_r: Vec<[f64; 3]>,
    /// Integral of |q - q_r|^2 over [0, T].
    pub loss_track: f64,
    /// Integral of |u|^2 over [0, T].
    pub loss_ctrl: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn d(&self) -> usize {
        self.ahat.first().map_or(0, Vec::len)
    }

    pub fn t_total(&self) -> f64 {
        *self.times.last().expect("trajectory has samples")
    }
}

pub(crate) fn scale<S: Scalar>(xs: &[S], c: f64) -> Vec<S> {
    xs.iter().map(|x| x.mulc(c)).collect()
}

pub(crate) fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

/// Validates that `dt` tiles `[0, t_total]` and returns the step count.
pub(crate) fn grid_steps(t_total: f64, dt: f64) -> Result<usize> {
    if !(t_total > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rollout needs T > 0 and dt > 0, got T = {t_total}, dt = {dt}"
        )));
    }
    let steps = (t_total / dt).round();
    if steps < 1.0 || (steps * dt - t_total).abs() > 1e-9 * t_total.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "T = {t_total} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

pub(crate) fn guard_state<S: Scalar>(x: &[S], t: f64) -> Result<()> {
    for v in x {
        let val = v.value();
        if !val.is_finite() || val.abs() > DIVERGENCE_GUARD {
            return Err(Error::RolloutDiverged {
                t,
                guard: DIVERGENCE_GUARD,
            });
        }
    }
    Ok(())
}

/// Right-hand side of the augmented ODE at time t. Returns the state
/// derivative and the control input evaluated at (t, x).
fn deriv<S, R, F, D>(
    t: f64,
    x: &[S],
    gains: &MdGains<S>,
    reference: &R,
    features: &F,
    disturbance: &D,
) -> (Vec<S>, [S; 3])
where
    S: Scalar,
    R: Reference + ?Sized,
    F: Fn(&[S]) -> Vec<Vec<S>>,
    D: Fn(&[S]) -> [S; 3],
{
    let d = gains.p_diag.len();
    let (q_rf, qd_rf, qdd_rf) = reference.eval(t);
    let lift = |c: f64| x[0].lift(c);
    let q_r = [lift(q_rf[0]), lift(q_rf[1]), lift(q_rf[2])];
    let qd_r = [lift(qd_rf[0]), lift(qd_rf[1]), lift(qd_rf[2])];
    let qdd_r = [lift(qdd_rf[0]), lift(qdd_rf[1]), lift(qdd_rf[2])];

    let q = [x[0], x[1], x[2]];
    let qd = [x[3], x[4], x[5]];
    let ahat = &x[6..6 + d];

    let sl = sliding(&q, &qd, &q_r, &qd_r, &qdd_r, &gains.lambda);
    let yhat = if d > 0 {
        features(&x[..6])
    } else {
        vec![Vec::new(); 3]
    };
    debug_assert!(yhat.len() == 3 && yhat.iter().all(|row| row.len() == d));
    let u = md_control_quad(q[2], &sl, &gains.k, &yhat, ahat);
    let f_ext = disturbance(&x[..6]);
    let qdd = quad_accel(q, u, f_ext);
    let ahat_dot = if d > 0 {
        adaptation_rhs_smooth(ahat, &sl.s, &yhat, &gains.p_diag, gains.p_exp, gains.epsilon)
    } else {
        Vec::new()
    };

    let mut dx = Vec::with_capacity(8 + d);
    dx.extend_from_slice(&qd);
    dx.extend_from_slice(&qdd);
    dx.extend(ahat_dot);
    dx.push(S::dot(&sl.qtilde, &sl.qtilde));
    dx.push(S::dot(&u, &u));
    (dx, u)
}

/// Integrates the closed loop over [0, T] with classical RK4, the control
/// recomputed at every stage, starting on the reference with a-hat = ahat0.
/// Returns the accumulated loss integrands (integral of |q~|^2, integral of
/// |u|^2). When a sample sink is given it receives (k, k dt, state, u) at
/// every sample time including t = 0 and t = T.
///
/// State combinations run one elementwise pass per term so that on a tape
/// each intermediate state vector occupies contiguous nodes and the feature
/// and surrogate networks can fuse their first-layer dot products.
pub fn rollout<S, R, F, D>(
    reference: &R,
    t_total: f64,
    dt: f64,
    gains: &MdGains<S>,
    features: F,
    disturbance: D,
    ahat0: &[f64],
    mut on_sample: Option<&mut dyn FnMut(usize, f64, &[S], &[S; 3])>,
) -> Result<(S, S)>
where
    S: Scalar,
    R: Reference + ?Sized,
    F: Fn(&[S]) -> Vec<Vec<S>>,
    D: Fn(&[S]) -> [S; 3],
{
    let steps = grid_steps(t_total, dt)?;
    let d = gains.p_diag.len();
    if ahat0.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "ahat0 has {} entries, adaptation gain has {d}",
            ahat0.len()
        )));
    }

    let lift = |c: f64| gains.p_exp.lift(c);
    let (q0, qd0, _) = reference.eval(0.0);
    let mut x: Vec<S> = Vec::with_capacity(8 + d);
    for c in q0 {
        x.push(lift(c));
    }
    for c in qd0 {
        x.push(lift(c));
    }
    for &c in ahat0 {
        x.push(lift(c));
    }
    x.push(lift(0.0));
    x.push(lift(0.0));
    guard_state(&x, 0.0)?;

    for k in 0..steps {
        let t = k as f64 * dt;
        let (k1, u) = deriv(t, &x, gains, reference, &features, &disturbance);
        if let Some(sink) = on_sample.as_deref_mut() {
            sink(k, t, &x, &u);
        }
        let x2 = add(&x, &scale(&k1, 0.5 * dt));
        let (k2, _) = deriv(t + 0.5 * dt, &x2, gains, reference, &features, &disturbance);
        let x3 = add(&x, &scale(&k2, 0.5 * dt));
        let (k3, _) = deriv(t + 0.5 * dt, &x3, gains, reference, &features, &disturbance);
        let x4 = add(&x, &scale(&k3, dt));
        let (k4, _) = deriv(t + dt, &x4, gains, reference, &features, &disturbance);

        let sum = add(&add(&k1, &scale(&add(&k2, &k3), 2.0)), &k4);
        x = add(&x, &scale(&sum, dt / 6.0));
        guard_state(&x, (k + 1) as f64 * dt)?;
    }

    if let Some(sink) = on_sample.as_deref_mut() {
        let (_, u) = deriv(t_total, &x, gains, reference, &features, &disturbance);
        sink(steps, t_total, &x, &u);
    }
    Ok((x[6 + d], x[7 + d]))
}

/// Rollout without recording; the pair is (integral of |q~|^2, integral of
/// |u|^2) at T. This is the entry point meta-training records on a tape.
pub fn rollout_loss<S, R, F, D>(
    reference: &R,
    t_total: f64,
    dt: f64,
    gains: &MdGains<S>,
    features: F,
    disturbance: D,
    ahat0: &[f64],
) -> Result<(S, S)>
where
    S: Scalar,
    R: Reference + ?Sized,
    F: Fn(&[S]) -> Vec<Vec<S>>,
    D: Fn(&[S]) -> [S; 3],
{
    rollout(reference, t_total, dt, gains, features, disturbance, ahat0, None)
}

/// Plain-f64 rollout that records every sample.
pub fn rollout_trajectory<R, F, D>(
    reference: &R,
    t_total: f64,
    dt: f64,
    gains: &MdGains<f64>,
    features: F,
    disturbance: D,
    ahat0: &[f64],
    meta: TrajectoryMeta,
) -> Result<Trajectory>
where
    R: Reference + ?Sized,
    F: Fn(&[f64]) -> Vec<Vec<f64>>,
    D: Fn(&[f64]) -> [f64; 3],
{
    let d = gains.d();
    let mut times = Vec::new();
    let mut qs = Vec::new();
    let mut qds = Vec::new();
    let mut ahats = Vec::new();
    let mut us = Vec::new();
    let mut q_rs = Vec::new();
    let mut qd_rs = Vec::new();

    let (jt, ju) = {
        let mut sink = |_k: usize, t: f64, x: &[f64], u: &[f64; 3]| {
            let (q_r, qd_r, _) = reference.eval(t);
            times.push(t);
            qs.push([x[0], x[1], x[2]]);
            qds.push([x[3], x[4], x[5]]);
            ahats.push(x[6..6 + d].to_vec());
            us.push(*u);
            q_rs.push(q_r);
            qd_rs.push(qd_r);
        };
        rollout(
            reference,
            t_total,
            dt,
            gains,
            features,
            disturbance,
            ahat0,
            Some(&mut sink),
        )?
    };

    Ok(Trajectory {
        dt,
        times,
        q: qs,
        qd: qds,
        ahat: ahats,
        u: us,
        q_r: q_rs,
        qd_r: qd_rs,
        loss_track: jt,
        loss_ctrl: ju,
        meta,
    })
}

/// Per-task loss (1/N) sum_i (1/T) integral (|q~|^2 + mu_ctrl |u|^2) dt
/// over the task's N trajectories.
pub fn task_loss(trajectories: &[Trajectory], mu_ctrl: f64) -> f64 {
    assert!(!trajectories.is_empty(), "task loss needs N >= 1 rollouts");
    let n = trajectories.len() as f64;
    trajectories
        .iter()
        .map(|tr| (tr.loss_track + mu_ctrl * tr.loss_ctrl) / tr.t_total())
        .sum::<f64>()
        / n
}

/// Same average over (integral |q~|^2, integral |u|^2) pairs straight from
/// [`rollout_loss`], usable on a tape.
pub fn task_loss_terms<S: Scalar>(terms: &[(S, S)], t_total: f64, mu_ctrl: f64) -> S {
    assert!(!terms.is_empty(), "task loss needs N >= 1 rollouts");
    let w = 1.0 / (t_total * terms.len() as f64);
    let mut acc = (terms[0].0 + terms[0].1.mulc(mu_ctrl)).mulc(w);
    for (jt, ju) in &terms[1..] {
        acc = acc + (*jt + ju.mulc(mu_ctrl)).mulc(w);
    }
    acc
}

/// Tracking error statistic (1/N) sum_{k=1}^{N} |q(k dt) - q_r(k dt)|^2
/// over a sampled trajectory. Reported as "RMS" after its usual name even
/// though the printed formula takes no root; see the README.
pub fn rms(tr: &Trajectory) -> f64 {
    let n = tr.times.len() - 1;
    assert!(n >= 1, "rms needs at least one sample past t = 0");
    let mut acc = 0.0;
    for k in 1..=n {
        for i in 0..3 {
            let e = tr.q[k][i] - tr.q_r[k][i];
            acc += e * e;
        }
    }
    acc / n as f64
}

/// Writes the trajectory CSV: header
/// `t,x,y,phi,xdot,ydot,phidot,xr,yr,phir,u1,u2,u3,ahat_1..ahat_d`, one row
/// per sample, 17 significant digits.
pub fn write_trajectory_csv<W: Write>(tr: &Trajectory, mut out: W) -> Result<()> {
    let d = tr.d();
    write!(out, "t,x,y,phi,xdot,ydot,phidot,xr,yr,phir,u1,u2,u3")?;
    for j in 1..=d {
        write!(out, ",ahat_{j}")?;
    }
    writeln!(out)?;
    for k in 0..tr.times.len() {
        write!(out, "{:.16e}", tr.times[k])?;
        for i in 0..3 {
            write!(out, ",{:.16e}", tr.q[k][i])?;
        }
        for i in 0..3 {
            write!(out, ",{:.16e}", tr.qd[k][i])?;
        }
        for i in 0..3 {
            write!(out, ",{:.16e}", tr.q_r[k][i])?;
        }
        for i in 0..3 {
            write!(out, ",{:.16e}", tr.u[k][i])?;
        }
        for a in &tr.ahat[k] {
            write!(out, ",{a:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a trajectory back from the CSV format. The format carries no
/// reference velocities, loss integrals, or provenance, so those fields
/// come back zeroed; q, q', u, q_r, a-hat, and the time grid round-trip
/// exactly.
pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Trajectory> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty trajectory CSV".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let fixed = [
        "t", "x", "y", "phi", "xdot", "ydot", "phidot", "xr", "yr", "phir", "u1", "u2", "u3",
    ];
    if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
        return Err(Error::InvalidConfig(format!(
            "unexpected trajectory CSV header: {header}"
        )));
    }
    let d = cols.len() - fixed.len();
    for (j, col) in cols[fixed.len()..].iter().enumerate() {
        if *col != format!("ahat_{}", j + 1) {
            return Err(Error::InvalidConfig(format!(
                "unexpected trajectory CSV column {col}"
            )));
        }
    }

    let mut times = Vec::new();
    let mut qs = Vec::new();
    let mut qds = Vec::new();
    let mut q_rs = Vec::new();
    let mut us = Vec::new();
    let mut ahats = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(13 + d);
        for field in line.trim().split(',') {
            vals.push(field.parse::<f64>().map_err(|e| {
                Error::InvalidConfig(format!("bad trajectory CSV field {field:?}: {e}"))
            })?);
        }
        if vals.len() != 13 + d {
            return Err(Error::InvalidConfig(format!(
                "trajectory CSV row has {} fields, expected {}",
                vals.len(),
                13 + d
            )));
        }
        times.push(vals[0]);
        qs.push([vals[1], vals[2], vals[3]]);
        qds.push([vals[4], vals[5], vals[6]]);
        q_rs.push([vals[7], vals[8], vals[9]]);
        us.push([vals[10], vals[11], vals[12]]);
        ahats.push(vals[13..].to_vec());
    }
    if times.len() < 2 {
        return Err(Error::InvalidConfig(
            "trajectory CSV needs at least two samples".into(),
        ));
    }
    let dt = times[1] - times[0];
    for k in 1..times.len() {
        if (times[k] - k as f64 * dt).abs() > 1e-9 * times[k].abs().max(1.0) {
            return Err(Error::InvalidConfig(
                "trajectory CSV time grid is not uniform".into(),
            ));
        }
    }

    let n = times.len();
    Ok(Trajectory {
        dt,
        times,
        q: qs,
        qd: qds,
        ahat: ahats,
        u: us,
        q_r: q_rs,
        qd_r: vec![[0.0; 3]; n],
        loss_track: 0.0,
        loss_ctrl: 0.0,
        meta: TrajectoryMeta {
            source: String::new(),
            seed: 0,
            lambda: [0.0; 3],
            k: [0.0; 3],
            p_diag: vec![0.0; d],
            p_exp: 0.0,
            epsilon: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, Var};
    use crate::dynamics::{wind_drag_smooth, OracleDisturbance, WindDrag, GRAVITY};
    use crate::features::{feature_net, init_mlp, Architecture};
    use crate::potential::Potential;
    use crate::reference::{DoubleLoop, Hover};

    fn zero_dist<S: Scalar>(s6: &[S]) -> [S; 3] {
        let z = s6[0].mulc(0.0);
        [z, z, z]
    }

    fn oracle_feature_fn(o: &OracleDisturbance) -> impl Fn(&[f64]) -> Vec<Vec<f64>> + '_ {
        |s6: &[f64]| {
            let q = [s6[0], s6[1], s6[2]];
            let qd = [s6[3], s6[4], s6[5]];
            o.features(&q, &qd)
        }
    }

    fn unit_oracle(seed: u64, d: usize) -> OracleDisturbance {
        let mut o = OracleDisturbance::new(seed, d, 1.0);
        let norm = o.a.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut o.a {
            *x /= norm;
        }
        o
    }

    fn simple_meta(g: &MdGains<f64>) -> TrajectoryMeta {
        TrajectoryMeta::new("test", 0, g)
    }

    #[test]
    fn first_sample_sits_exactly_on_the_reference() {
        let r = DoubleLoop::new(8.0);
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let tr = rollout_trajectory(
            &r,
            1.0,
            0.02,
            &gains,
            |_: &[f64]| vec![Vec::new(); 3],
            zero_dist,
            &[],
            simple_meta(&gains),
        )
        .unwrap();
        let (q0, qd0, _) = r.eval(0.0);
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(tr.q[0], q0);
        assert_eq!(tr.qd[0], qd0);
        assert_eq!(tr.q_r[0], q0);
        assert_eq!(tr.times.len(), 51);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
    }

    #[test]
    fn hover_feedforward_is_exact_to_machine_precision() {
        let r = Hover {
            q: [1.0, 2.0, 0.0],
            t_total: 2.0,
        };
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let tr = rollout_trajectory(
            &r,
            2.0,
            0.02,
            &gains,
            |_: &[f64]| vec![Vec::new(); 3],
            zero_dist,
            &[],
            simple_meta(&gains),
        )
        .unwrap();
        for k in 0..tr.times.len() {
            for i in 0..3 {
                assert!((tr.q[k][i] - tr.q_r[k][i]).abs() < 1e-13);
            }
            assert!((tr.u[k][1] - GRAVITY[1]).abs() < 1e-12);
        }
        assert!(tr.loss_track < 1e-20);
    }

    #[test]
    fn exact_feedforward_tracks_a_slow_loop_to_integration_precision() {
        // Zero disturbance and a-hat = 0: the closed loop's exact solution
        // is the reference itself, so all remaining error is RK4's.
        let r = DoubleLoop::new(20.0);
        let oracle = unit_oracle(3, 5);
        let mut gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        gains.p_diag = vec![1.0; 5];
        gains.epsilon = 1e-3;
        let tr = rollout_trajectory(
            &r,
            2.0,
            0.01,
            &gains,
            oracle_feature_fn(&oracle),
            zero_dist,
            &[0.0; 5],
            simple_meta(&gains),
        )
        .unwrap();
        let worst = (0..tr.times.len())
            .map(|k| {
                (0..3)
                    .map(|i| (tr.q[k][i] - tr.q_r[k][i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "worst tracking error {worst}");
    }

    #[test]
    fn oracle_features_track_the_oracle_disturbance() {
        // Matched disturbance (delta = 0) at p = 2.2: q~ -> 0 and the
        // Lyapunov value V = |s|^2/2 + d_psi(Pa || P a-hat) must not grow.
        // epsilon = 0.1 keeps the inverse Hessian bounded by 10 near
        // a-hat = 0, where |x|^{p-2} alone would vanish and make the
        // adaptation law stiff at this step size.
        let d = 6;
        let oracle = unit_oracle(7, d);
        let mut gains = MdGains::nominal([6.0; 3], [15.0; 3]);
        gains.p_diag = vec![0.3; d];
        gains.p_exp = 2.2;
        gains.epsilon = 0.1;
        let r = DoubleLoop::new(10.0);
        let tr = rollout_trajectory(
            &r,
            10.0,
            0.02,
            &gains,
            oracle_feature_fn(&oracle),
            |s6: &[f64]| oracle.value(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]]),
            &vec![0.0; d],
            simple_meta(&gains),
        )
        .unwrap();

        let qt_final = (0..3)
            .map(|i| (tr.q.last().unwrap()[i] - tr.q_r.last().unwrap()[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(qt_final < 1e-3, "final tracking error {qt_final}");

        let pot = Potential::new(gains.p_exp, gains.epsilon).unwrap();
        let pa: Vec<f64> = oracle.a.iter().zip(&gains.p_diag).map(|(a, p)| p * a).collect();
        let mut prev = f64::INFINITY;
        for k in 0..tr.times.len() {
            let mut s2 = 0.0;
            for i in 0..3 {
                let qt = tr.q[k][i] - tr.q_r[k][i];
                let qdt = tr.qd[k][i] - tr.qd_r[k][i];
                let s = qdt + gains.lambda[i] * qt;
                s2 += s * s;
            }
            let pahat: Vec<f64> = tr.ahat[k]
                .iter()
                .zip(&gains.p_diag)
                .map(|(a, p)| p * a)
                .collect();
            let v = 0.5 * s2 + pot.bregman(&pa, &pahat);
            assert!(
                v <= prev + 1e-6,
                "V increased at sample {k}: {prev} -> {v}"
            );
            prev = v;
        }
    }

    #[test]
    fn rk4_order_via_richardson_ratio() {
        // Runs at p = 2, the one family member whose Hessian is constant.
        // For p != 2 the |x|^{p-2} factor has unbounded slope at coordinate
        // zeros, a-hat starts at zero and re-crosses them, and the resulting
        // C0 right-hand side drops RK4 to roughly second order (measured
        // ratio ~3.5 at p = 2.2 regardless of epsilon).
        let d = 6;
        let oracle = unit_oracle(7, d);
        let mut gains = MdGains::nominal([6.0; 3], [15.0; 3]);
        gains.p_diag = vec![0.3; d];
        gains.p_exp = 2.0;
        gains.epsilon = 1e-3;
        let r = DoubleLoop::new(10.0);

        let run = |dt: f64| -> Vec<f64> {
            let tr = rollout_trajectory(
                &r,
                10.0,
                dt,
                &gains,
                oracle_feature_fn(&oracle),
                |s6: &[f64]| oracle.value(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]]),
                &vec![0.0; d],
                simple_meta(&gains),
            )
            .unwrap();
            let mut state: Vec<f64> = Vec::new();
            state.extend_from_slice(tr.q.last().unwrap());
            state.extend_from_slice(tr.qd.last().unwrap());
            state.extend_from_slice(tr.ahat.last().unwrap());
            state.push(tr.loss_track);
            state.push(tr.loss_ctrl);
            state
        };

        let a = run(0.02);
        let b = run(0.01);
        let c = run(0.005);
        let diff = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = diff(&a, &b) / diff(&b, &c);
        assert!(
            (8.0..=32.0).contains(&ratio),
            "Richardson ratio {ratio} outside [8, 32]"
        );
    }

    #[test]
    fn unstable_gains_report_divergence_time() {
        let r = DoubleLoop::new(10.0);
        let gains = MdGains::nominal([1.0; 3], [-5.0; 3]);
        let err = rollout_trajectory(
            &r,
            10.0,
            0.02,
            &gains,
            |_: &[f64]| vec![Vec::new(); 3],
            zero_dist,
            &[],
            simple_meta(&gains),
        )
        .unwrap_err();
        match err {
            Error::RolloutDiverged { t, guard } => {
                assert!(t > 0.0 && t < 10.0 + 1e-9);
                assert_eq!(guard, DIVERGENCE_GUARD);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn rejects_nonintegral_step_counts() {
        let r = Hover { q: [0.0; 3], t_total: 3.0 };
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let run = |t: f64, dt: f64| {
            rollout_loss(
                &r,
                t,
                dt,
                &gains,
                |_: &[f64]| vec![Vec::new(); 3],
                zero_dist,
                &[],
            )
        };
        assert!(run(1.0, 0.3).is_err());
        assert!(run(-1.0, 0.1).is_err());
        assert!(run(1.0, 0.02).is_ok());
    }

    #[test]
    fn constant_control_cost_accumulates_linearly() {
        // Hover holds u = [0, 9.81, 0], so the control integrand is the
        // constant 9.81^2 and RK4 integrates it exactly.
        let r = Hover { q: [0.0; 3], t_total: 3.0 };
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let (jt, ju) = rollout_loss(
            &r,
            3.0,
            0.02,
            &gains,
            |_: &[f64]| vec![Vec::new(); 3],
            zero_dist,
            &[],
        )
        .unwrap();
        assert!(jt.abs() < 1e-20);
        assert!((ju - 3.0 * 9.81 * 9.81).abs() < 1e-9);
    }

    #[test]
    fn task_loss_matches_hand_values() {
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let mk = |jt: f64, ju: f64| Trajectory {
            dt: 0.5,
            times: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            q: vec![[0.0; 3]; 5],
            qd: vec![[0.0; 3]; 5],
            ahat: vec![Vec::new(); 5],
            u: vec![[0.0; 3]; 5],
            q_r: vec![[0.0; 3]; 5],
            qd_r: vec![[0.0; 3]; 5],
            loss_track: jt,
            loss_ctrl: ju,
            meta: simple_meta(&gains),
        };
        // Constant q~ = [1, 0, 0] over [0, 2]: integral is 2, average 1.
        let a = mk(2.0, 6.0);
        let b = mk(4.0, 2.0);
        assert_eq!(task_loss(&[a.clone()], 0.0), 1.0);
        let l0 = task_loss(&[a.clone(), b.clone()], 0.0);
        let l1 = task_loss(&[a.clone(), b.clone()], 1.0);
        let l2 = task_loss(&[a.clone(), b.clone()], 2.0);
        assert!((l0 - 1.5).abs() < 1e-15);
        let ctrl_mean = (6.0 / 2.0 + 2.0 / 2.0) / 2.0;
        assert!((l1 - (1.5 + ctrl_mean)).abs() < 1e-15);
        assert!(((l2 - l1) - ctrl_mean).abs() < 1e-15);

        let terms = [(2.0, 6.0), (4.0, 2.0)];
        assert!((task_loss_terms(&terms, 2.0, 1.0) - l1).abs() < 1e-15);
    }

    #[test]
    fn rms_of_constant_offset() {
        let gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        let n = 40;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * 0.02).collect();
        let q = vec![[0.1, 0.0, 0.0]; n + 1];
        let tr = Trajectory {
            dt: 0.02,
            times,
            q: q.clone(),
            qd: vec![[0.0; 3]; n + 1],
            ahat: vec![Vec::new(); n + 1],
            u: vec![[0.0; 3]; n + 1],
            q_r: vec![[0.0; 3]; n + 1],
            qd_r: vec![[0.0; 3]; n + 1],
            loss_track: 0.0,
            loss_ctrl: 0.0,
            meta: simple_meta(&gains),
        };
        assert!((rms(&tr) - 0.01).abs() < 1e-15);
        let mut perfect = tr.clone();
        perfect.q_r = q;
        assert_eq!(rms(&perfect), 0.0);
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_trajectories() {
        let d = 4;
        let oracle = unit_oracle(2, d);
        let mut gains = MdGains::nominal([1.5, 1.0, 2.0], [5.0, 4.0, 6.0]);
        gains.p_diag = vec![0.8; d];
        gains.p_exp = 2.5;
        gains.epsilon = 1e-3;
        let r = DoubleLoop::new(6.0);
        let wind = WindDrag::new(2.0);
        let run = || {
            rollout_trajectory(
                &r,
                3.0,
                0.02,
                &gains,
                oracle_feature_fn(&oracle),
                |s6: &[f64]| {
                    wind_drag_smooth([s6[0], s6[1], s6[2]], [s6[3], s6[4], s6[5]], &wind)
                },
                &vec![0.0; d],
                simple_meta(&gains),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn taped_rollout_reproduces_plain_f64_bit_for_bit() {
        // The generic path instantiated at Var must execute the exact same
        // f64 operations as the plain instantiation.
        let d = 3;
        let oracle = unit_oracle(9, d);
        let arch = Architecture::feature_default(d);
        let theta = init_mlp(1, arch.clone(), d);
        let r = DoubleLoop::new(4.0);
        let wind = WindDrag::new(3.0);
        let mut gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        gains.p_diag = vec![1.2; d];
        gains.p_exp = 2.3;
        gains.epsilon = 1e-3;

        let plain = rollout_loss(
            &r,
            0.5,
            0.01,
            &gains,
            |s6: &[f64]| feature_net(&arch, &theta.data, s6, d).unwrap(),
            |s6: &[f64]| wind_drag_smooth([s6[0], s6[1], s6[2]], [s6[3], s6[4], s6[5]], &wind),
            &vec![0.0; d],
        )
        .unwrap();
        let _ = oracle;

        let tape = Tape::new();
        let vars = tape.params(&theta.data);
        let vgains = MdGains::<Var<'_>> {
            lambda: [vars[0].lift(1.0), vars[0].lift(1.0), vars[0].lift(1.0)],
            k: [vars[0].lift(5.0), vars[0].lift(5.0), vars[0].lift(5.0)],
            p_diag: vec![vars[0].lift(1.2); d],
            p_exp: vars[0].lift(2.3),
            epsilon: 1e-3,
        };
        let (jt, ju) = rollout_loss(
            &r,
            0.5,
            0.01,
            &vgains,
            |s6: &[Var<'_>]| feature_net(&arch, &vars, s6, d).unwrap(),
            |s6: &[Var<'_>]| wind_drag_smooth([s6[0], s6[1], s6[2]], [s6[3], s6[4], s6[5]], &wind),
            &vec![0.0; d],
        )
        .unwrap();
        assert_eq!(jt.value(), plain.0);
        assert_eq!(ju.value(), plain.1);
    }

    #[test]
    fn rollout_loss_gradient_matches_finite_differences() {
        // Gradient of a half-second rollout loss with respect to a 4-entry
        // slice of the feature parameters, the rest held constant.
        let d = 3;
        let arch = Architecture(vec![6, 8, 3 * d]);
        let theta = init_mlp(4, arch.clone(), d);
        let r = DoubleLoop::new(4.0);
        let wind = WindDrag::new(2.0);
        let probe = [0usize, 7, 19, theta.data.len() - 1];
        let init: Vec<f64> = probe.iter().map(|&i| theta.data[i]).collect();

        let worst = grad_check(&init, 1e-6, |_tape, vars| {
            let full: Vec<Var<'_>> = theta
                .data
                .iter()
                .enumerate()
                .map(|(i, &c)| match probe.iter().position(|&p| p == i) {
                    Some(j) => vars[j],
                    None => vars[0].lift(c),
                })
                .collect();
            let gains = MdGains::<Var<'_>> {
                lambda: [vars[0].lift(1.0); 3],
                k: [vars[0].lift(5.0); 3],
                p_diag: vec![vars[0].lift(1.0); d],
                p_exp: vars[0].lift(2.2),
                epsilon: 1e-3,
            };
            let (jt, ju) = rollout_loss(
                &r,
                0.5,
                0.01,
                &gains,
                |s6: &[Var<'_>]| feature_net(&arch, &full, s6, d).unwrap(),
                |s6: &[Var<'_>]| {
                    wind_drag_smooth([s6[0], s6[1], s6[2]], [s6[3], s6[4], s6[5]], &wind)
                },
                &vec![0.0; d],
            )
            .unwrap();
            jt + ju.mulc(0.1)
        })
        .unwrap();
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let d = 3;
        let oracle = unit_oracle(6, d);
        let mut gains = MdGains::nominal([1.0; 3], [5.0; 3]);
        gains.p_diag = vec![1.0; d];
        gains.epsilon = 1e-3;
        let r = DoubleLoop::new(4.0);
        let tr = rollout_trajectory(
            &r,
            1.0,
            0.02,
            &gains,
            oracle_feature_fn(&oracle),
            |s6: &[f64]| oracle.value(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]]),
            &vec![0.0; d],
            simple_meta(&gains),
        )
        .unwrap();

        let mut buf = Vec::new();
        write_trajectory_csv(&tr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,y,phi,xdot,ydot,phidot,xr,yr,phir,u1,u2,u3,ahat_1"));

        let back = read_trajectory_csv(text.as_bytes()).unwrap();
        assert_eq!(back.times, tr.times);
        assert_eq!(back.q, tr.q);
        assert_eq!(back.qd, tr.qd);
        assert_eq!(back.q_r, tr.q_r);
        assert_eq!(back.u, tr.u);
        assert_eq!(back.ahat, tr.ahat);
        assert_eq!(back.d(), d);
    }

    #[test]
    fn csv_reader_rejects_malformed_input() {
        assert!(read_trajectory_csv("".as_bytes()).is_err());
        assert!(read_trajectory_csv("a,b,c\n1,2,3\n".as_bytes()).is_err());
        let hdr = "t,x,y,phi,xdot,ydot,phidot,xr,yr,phir,u1,u2,u3";
        let short_row = format!("{hdr}\n0.0,1.0\n");
        assert!(read_trajectory_csv(short_row.as_bytes()).is_err());
        let bad_field = format!(
            "{hdr}\n{}\n{}\n",
            ["0.0"; 13].join(","),
            ["nope"; 13].join(",")
        );
        assert!(read_trajectory_csv(bad_field.as_bytes()).is_err());
    }
}
