//! Surrogate disturbance models fitted to PID-collected trajectories.
//!
//! Collection drives the true wind-drag loop with a PID controller along a
//! random-walk spline reference, holding the control constant over each
//! sample interval. Fitting replays the recorded controls: every sample is
//! integrated one interval forward with the candidate surrogate in place of
//! the true disturbance, and the squared prediction error against the next
//! sample is minimized. Because generation and prediction share the
//! integrator and the zero-order hold, a surrogate equal to the true
//! disturbance reproduces the data exactly.

use crate::autodiff::value_and_grad;
use crate::controller::{pid_formula, PidGains};
use crate::dynamics::{quad_accel, wind_drag, WindDrag};
use crate::error::{Error, Result};
use crate::features::{init_mlp, surrogate_net, Architecture, MlpParams};
use crate::optim::{Adam, AdamConfig};
use crate::reference::{random_walk_reference, Reference};
use crate::rng::substream_seed;
use crate::scalar::Scalar;
use crate::simulate::{add, grid_steps, guard_state, scale, Trajectory, TrajectoryMeta};

/// Samples (q, q', u) of one collection run, with the wind speed and seed
/// kept as metadata only; fitting never reads `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub q: Vec<[f64; 3]>,
    pub qd: Vec<[f64; 3]>,
    pub u: Vec<[f64; 3]>,
    pub dt: f64,
    pub w: f64,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn from_trajectory(tr: &Trajectory, w: f64) -> Result<TrajectoryDataset> {
        if tr.times.len() < 2 {
            return Err(Error::DimensionMismatch(
                "one-step fitting needs at least two samples".into(),
            ));
        }
        Ok(TrajectoryDataset {
            q: tr.q.clone(),
            qd: tr.qd.clone(),
            u: tr.u.clone(),
            dt: tr.dt,
            w,
            seed: tr.meta.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// PID closed-loop rollout recording every sample. The control is computed
/// at each sample time and held constant over the interval; the error
/// integral, the tracking cost and the control cost ride along in the RK4
/// state, so only the control itself is discretized.
pub fn collect_rollout_with<R, D>(
    reference: &R,
    disturbance: D,
    pid: &PidGains,
    t_total: f64,
    dt: f64,
    source: &str,
    seed: u64,
) -> Result<Trajectory>
where
    R: Reference + ?Sized,
    D: Fn(&[f64; 3], &[f64; 3]) -> [f64; 3],
{
    let steps = grid_steps(t_total, dt)?;
    let deriv = |t: f64, x: &[f64; 11], u: &[f64; 3]| -> [f64; 11] {
        let q = [x[0], x[1], x[2]];
        let qd = [x[3], x[4], x[5]];
        let (q_r, _, _) = reference.eval(t);
        let f = disturbance(&q, &qd);
        let qdd = quad_accel(q, *u, f);
        let mut qt2 = 0.0;
        for i in 0..3 {
            qt2 += (q[i] - q_r[i]) * (q[i] - q_r[i]);
        }
        let u2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        [
            qd[0],
            qd[1],
            qd[2],
            qdd[0],
            qdd[1],
            qdd[2],
            x[0] - q_r[0],
            x[1] - q_r[1],
            x[2] - q_r[2],
            qt2,
            u2,
        ]
    };

    let n = steps + 1;
    let mut times = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    let mut qds = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut q_rs = Vec::with_capacity(n);
    let mut qd_rs = Vec::with_capacity(n);

    let (q0, qd0, _) = reference.eval(0.0);
    let mut x = [0.0f64; 11];
    x[..3].copy_from_slice(&q0);
    x[3..6].copy_from_slice(&qd0);

    let mut record = |t: f64, x: &[f64; 11]| -> [f64; 3] {
        let q = [x[0], x[1], x[2]];
        let qd = [x[3], x[4], x[5]];
        let integral = [x[6], x[7], x[8]];
        let r = reference.eval(t);
        let u = pid_formula(&q, &qd, r, pid, &integral);
        times.push(t);
        qs.push(q);
        qds.push(qd);
        us.push(u);
        q_rs.push(r.0);
        qd_rs.push(r.1);
        u
    };

    guard_state(&x, 0.0)?;
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = record(t, &x);
        let k1 = deriv(t, &x, &u);
        let x2 = rk_axpy(&x, &k1, 0.5 * dt);
        let k2 = deriv(t + 0.5 * dt, &x2, &u);
        let x3 = rk_axpy(&x, &k2, 0.5 * dt);
        let k3 = deriv(t + 0.5 * dt, &x3, &u);
        let x4 = rk_axpy(&x, &k3, dt);
        let k4 = deriv(t + dt, &x4, &u);
        for i in 0..11 {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        guard_state(&x, (k + 1) as f64 * dt)?;
    }
    record(t_total, &x);

    Ok(Trajectory {
        dt,
        times,
        q: qs,
        qd: qds,
        ahat: vec![Vec::new(); n],
        u: us,
        q_r: q_rs,
        qd_r: qd_rs,
        loss_track: x[9],
        loss_ctrl: x[10],
        meta: TrajectoryMeta::bare(source, seed),
    })
}

fn rk_axpy(x: &[f64; 11], k: &[f64; 11], c: f64) -> [f64; 11] {
    let mut out = *x;
    for i in 0..11 {
        out[i] += c * k[i];
    }
    out
}

/// Collection run for one task: wind drag at speed `w` along a random-walk
/// spline seeded from the task seed.
pub fn collect_rollout(w: f64, seed: u64, t_total: f64, dt: f64) -> Result<Trajectory> {
    let spline = random_walk_reference(substream_seed(seed, "waypoints", 0), t_total)?;
    let wd = WindDrag::new(w);
    collect_rollout_with(
        &spline,
        |q: &[f64; 3], qd: &[f64; 3]| wind_drag(q, qd, &wd),
        &PidGains::default(),
        t_total,
        dt,
        "pid-collect",
        seed,
    )
}

pub fn collect_trajectory(w: f64, seed: u64, t_total: f64, dt: f64) -> Result<TrajectoryDataset> {
    let tr = collect_rollout(w, seed, t_total, dt)?;
    TrajectoryDataset::from_trajectory(&tr, w)
}

/// Mean squared one-step prediction error of the surrogate with parameters
/// `xi` over the dataset's transitions: (1/N_e) sum_k |x-hat(dt) - x_{k+1}|^2
/// on the (q, q') components, where x-hat integrates one RK4 step from
/// sample k with the recorded u_k held constant.
pub fn one_step_loss<S: Scalar>(
    arch: &Architecture,
    xi: &[S],
    ds: &TrajectoryDataset,
) -> Result<S> {
    if xi.len() != arch.n_params() {
        return Err(Error::DimensionMismatch(format!(
            "surrogate has {} parameters, architecture wants {}",
            xi.len(),
            arch.n_params()
        )));
    }
    if ds.len() < 2 {
        return Err(Error::DimensionMismatch(
            "one-step loss needs at least two samples".into(),
        ));
    }
    let h = ds.dt;
    let lift = |c: f64| xi[0].lift(c);
    let deriv = |x: &[S], u: &[S; 3]| -> Result<Vec<S>> {
        let fhat = surrogate_net(arch, xi, &x[..6])?;
        let qdd = quad_accel([x[0], x[1], x[2]], *u, fhat);
        Ok(vec![x[3], x[4], x[5], qdd[0], qdd[1], qdd[2]])
    };
    let mut total: Option<S> = None;
    for k in 0..ds.len() - 1 {
        let mut x: Vec<S> = Vec::with_capacity(6);
        for i in 0..3 {
            x.push(lift(ds.q[k][i]));
        }
        for i in 0..3 {
            x.push(lift(ds.qd[k][i]));
        }
        let u = [lift(ds.u[k][0]), lift(ds.u[k][1]), lift(ds.u[k][2])];
        let k1 = deriv(&x, &u)?;
        let x2 = add(&x, &scale(&k1, 0.5 * h));
        let k2 = deriv(&x2, &u)?;
        let x3 = add(&x, &scale(&k2, 0.5 * h));
        let k3 = deriv(&x3, &u)?;
        let x4 = add(&x, &scale(&k3, h));
        let k4 = deriv(&x4, &u)?;
        let sum = add(&add(&k1, &scale(&add(&k2, &k3), 2.0)), &k4);
        let xn = add(&x, &scale(&sum, h / 6.0));

        let e: Vec<S> = (0..6)
            .map(|i| {
                let target = if i < 3 { ds.q[k + 1][i] } else { ds.qd[k + 1][i - 3] };
                xn[i].addc(-target)
            })
            .collect();
        let sq = S::dot(&e, &e);
        total = Some(match total {
            None => sq,
            Some(acc) => acc + sq,
        });
    }
    Ok(total.expect("at least one transition").mulc(1.0 / ds.len() as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            steps: 2000,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Best-loss parameters seen during the run, not the final iterate.
    pub params: MlpParams,
    /// Loss before each step, plus the final loss as the last entry.
    pub history: Vec<f64>,
    pub best_loss: f64,
    /// One-step loss of the all-zero surrogate, for reporting fits against
    /// a do-nothing baseline.
    pub baseline_loss: f64,
}

/// Full-batch adaptive-moment fit of one surrogate to one dataset.
pub fn fit_surrogate(ds: &TrajectoryDataset, seed: u64, cfg: &FitConfig) -> Result<FitResult> {
    let arch = Architecture::surrogate_default();
    let mut params = init_mlp(seed, arch.clone(), 0);
    let zeros = MlpParams::zeros(arch.clone(), 0);
    let baseline_loss = one_step_loss(&arch, &zeros.data, ds)?;

    let mut adam = Adam::new(params.data.len(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, params.data.clone());
    for step in 0..cfg.steps {
        let (loss, grad) = value_and_grad(&params.data, |_, vars| {
            one_step_loss(&arch, vars, ds).expect("dimensions validated above")
        })
        .map_err(|e| Error::NonFinite(format!("surrogate fit step {step}: {e}")))?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "surrogate fit step {step}: loss {loss}, non-finite gradient"
            )));
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, params.data.clone());
        }
        adam.step(&mut params.data, &grad);
    }
    let final_loss = one_step_loss(&arch, &params.data, ds)?;
    history.push(final_loss);
    if final_loss < best.0 {
        best = (final_loss, params.data.clone());
    }
    params.data = best.1;
    Ok(FitResult {
        params,
        history,
        best_loss: best.0,
        baseline_loss,
    })
}
