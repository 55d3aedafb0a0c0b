//! Executable stability checks along recorded trajectories: Lyapunov
//! values, the descent bound on V-dot, the gamma integral and the ISS
//! ultimate bound.

use crate::dynamics::{Manipulator, PlanarQuadrotor};
use crate::error::{Error, Result};
use crate::potential::Potential;
use crate::simulate::{MdGains, Trajectory};
use serde::{Deserialize, Serialize};

/// V = s' M(q) s / 2 + d_psi(Pa || P a-hat).
pub fn lyapunov(
    s: &[f64; 3],
    m: &[[f64; 3]; 3],
    a: &[f64],
    ahat: &[f64],
    p_diag: &[f64],
    pot: &Potential,
) -> f64 {
    let mut quad = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            quad += s[i] * m[i][j] * s[j];
        }
    }
    let pa: Vec<f64> = a.iter().zip(p_diag).map(|(a, p)| p * a).collect();
    let pahat: Vec<f64> = ahat.iter().zip(p_diag).map(|(a, p)| p * a).collect();
    0.5 * quad + pot.bregman(&pa, &pahat)
}

/// Integral of |exp(-tau Lambda)|_2 over [0, inf), by composite Simpson
/// quadrature truncated where the integrand drops below 1e-12. For
/// diagonal positive definite Lambda this equals 1 / lambda_min.
pub fn gamma(lambda: &[f64]) -> Result<f64> {
    if lambda.is_empty() || lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gamma needs a positive definite diagonal, got {lambda:?}"
        )));
    }
    let l_min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    let integrand = |tau: f64| {
        lambda
            .iter()
            .map(|&l| (-tau * l).exp())
            .fold(0.0f64, f64::max)
    };
    let t_end = (1e12f64).ln() / l_min;
    let n = 20_000usize;
    let h = t_end / n as f64;
    let mut acc = integrand(0.0) + integrand(t_end);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * h);
    }
    Ok(acc * h / 3.0)
}

/// Radius of the ultimate-bound set: gamma * delta |a| / lambda_min(K).
pub fn bound_radius(gamma: f64, delta: f64, a_norm: f64, lambda_min_k: f64) -> f64 {
    gamma * delta * a_norm / lambda_min_k
}

/// Per-sample record of the descent check and the ultimate bound for one
/// closed-loop trajectory, arrays aligned with the trajectory grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub times: Vec<f64>,
    pub v: Vec<f64>,
    /// Central finite difference of V, one-sided at the ends.
    pub vdot: Vec<f64>,
    /// -lambda_min(K) |s|^2 + |s| delta |a| per sample.
    pub bound: Vec<f64>,
    /// Samples where vdot exceeds the bound by more than the tolerance
    /// 1e-4 * max(1, |V|).
    pub violations: usize,
    pub delta: f64,
    pub a_norm: f64,
    pub lambda_min_k: f64,
    pub gamma: f64,
    pub radius: f64,
    /// First time from which |q - q_r| stays within the radius.
    pub entry_time: Option<f64>,
    pub contained: bool,
}

fn lambda_min_of(diag: &[f64; 3], name: &str) -> Result<f64> {
    if diag.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{name} must be positive definite, got {diag:?}"
        )));
    }
    Ok(diag.iter().cloned().fold(f64::INFINITY, f64::min))
}

fn tracking_norms(tr: &Trajectory) -> Vec<f64> {
    tr.q
        .iter()
        .zip(&tr.q_r)
        .map(|(q, qr)| {
            (0..3)
                .map(|i| (q[i] - qr[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn entry_index(norms: &[f64], radius: f64) -> Option<usize> {
    let last_outside = norms.iter().rposition(|&n| n > radius);
    match last_outside {
        None => Some(0),
        Some(k) if k + 1 < norms.len() => Some(k + 1),
        Some(_) => None,
    }
}

/// Finite-differences V along the samples and checks the descent bound
/// vdot <= -lambda_min(K) |s|^2 + |s| delta |a| at each one, then attaches
/// the ultimate-bound radius and entry time for the same trajectory.
pub fn vdot_bound_check(
    tr: &Trajectory,
    a: &[f64],
    delta: f64,
    gains: &MdGains<f64>,
) -> Result<StabilityReport> {
    let n = tr.times.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "descent check needs at least 3 samples, got {n}"
        )));
    }
    if a.len() != tr.d() || gains.d() != tr.d() {
        return Err(Error::DimensionMismatch(format!(
            "a has {} entries, gains {}, trajectory {}",
            a.len(),
            gains.d(),
            tr.d()
        )));
    }
    let lambda_min_k = lambda_min_of(&gains.k, "K")?;
    let pot = Potential::new(gains.p_exp, gains.epsilon)?;
    let model = PlanarQuadrotor;
    let a_norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut v = Vec::with_capacity(n);
    let mut bound = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = [0.0; 3];
        let mut s2 = 0.0;
        for i in 0..3 {
            let qt = tr.q[k][i] - tr.q_r[k][i];
            let qtd = tr.qd[k][i] - tr.qd_r[k][i];
            s[i] = qtd + gains.lambda[i] * qt;
            s2 += s[i] * s[i];
        }
        v.push(lyapunov(
            &s,
            &model.mass(&tr.q[k]),
            a,
            &tr.ahat[k],
            &gains.p_diag,
            &pot,
        ));
        bound.push(-lambda_min_k * s2 + s2.sqrt() * delta * a_norm);
    }

    let dt = tr.dt;
    let mut vdot = Vec::with_capacity(n);
    vdot.push((v[1] - v[0]) / dt);
    for k in 1..n - 1 {
        vdot.push((v[k + 1] - v[k - 1]) / (2.0 * dt));
    }
    vdot.push((v[n - 1] - v[n - 2]) / dt);

    let violations = (0..n)
        .filter(|&k| vdot[k] > bound[k] + 1e-4 * v[k].abs().max(1.0))
        .count();

    let g = gamma(&gains.lambda)?;
    let radius = bound_radius(g, delta, a_norm, lambda_min_k);
    let norms = tracking_norms(tr);
    let entry = entry_index(&norms, radius);
    Ok(StabilityReport {
        times: tr.times.clone(),
        v,
        vdot,
        bound,
        violations,
        delta,
        a_norm,
        lambda_min_k,
        gamma: g,
        radius,
        entry_time: entry.map(|k| tr.times[k]),
        contained: entry.is_some(),
    })
}

/// Ultimate bound for one trajectory: the radius of the compact set, whether
/// the tracking error ends up staying inside it, and the first time from
/// which it does.
pub fn ultimate_bound_check(
    tr: &Trajectory,
    a: &[f64],
    delta: f64,
    gains: &MdGains<f64>,
) -> Result<(f64, bool, Option<f64>)> {
    let lambda_min_k = lambda_min_of(&gains.k, "K")?;
    let a_norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let radius = bound_radius(gamma(&gains.lambda)?, delta, a_norm, lambda_min_k);
    let norms = tracking_norms(tr);
    let entry = entry_index(&norms, radius);
    Ok((radius, entry.is_some(), entry.map(|k| tr.times[k])))
}

/// Constant rank-one feature perturbation with operator 2-norm `delta`,
/// the constructed-error input to the descent and ultimate-bound checks.
pub fn rank_one_perturbation(d: usize, delta: f64) -> Vec<Vec<f64>> {
    let u = [1.0, 2.0, -1.0];
    let un = (6.0f64).sqrt();
    let v: Vec<f64> = (0..d)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let vn = (d as f64).sqrt();
    (0..3)
        .map(|i| v.iter().map(|vj| delta * u[i] / un * vj / vn).collect())
        .collect()
}
