//! The mirror-descent adaptive controller and the PID data collector.
//!
//! u = tau^{-1}(tau_bar - Y-hat a-hat) with
//! tau_bar = M qdd_v + C qd_v + g - K s, and the adaptation law
//! a-hat' = P^{-1} (Hess psi(P a-hat))^{-1} P^{-1} Y-hat' s.
//!
//! Gains are diagonal positive matrices stored as exponentials of raw
//! unconstrained reals, so meta-gradient steps can never leave the
//! positive-definite cone.

use crate::dynamics::{quad_tau_inverse, GRAVITY};
use crate::error::{Error, Result};
use crate::potential::{psi_hess_smooth, Potential};
use crate::scalar::Scalar;

/// Diagonal gains Lambda, K (3x3) and P (dxd), raw (log-space) storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    pub raw_lambda: [f64; 3],
    pub raw_k: [f64; 3],
    pub raw_p: Vec<f64>,
}

impl Gains {
    /// Identity gains of adaptation dimension d.
    pub fn identity(d: usize) -> Gains {
        Gains {
            raw_lambda: [0.0; 3],
            raw_k: [0.0; 3],
            raw_p: vec![0.0; d],
        }
    }

    /// Flattened raw vector [Lambda(3), K(3), P(d)]; the exact inverse of
    /// [`Gains::from_raw_vec`]. Raw storage is the canonical form: this
    /// round trip is lossless, while encoding decoded diagonals goes
    /// through ln(exp(.)) and can move the last bit.
    pub fn raw_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + self.raw_p.len());
        v.extend_from_slice(&self.raw_lambda);
        v.extend_from_slice(&self.raw_k);
        v.extend_from_slice(&self.raw_p);
        v
    }

    pub fn from_raw_vec(v: &[f64]) -> Result<Gains> {
        if v.len() < 7 {
            return Err(Error::DimensionMismatch(format!(
                "raw gain vector needs at least 7 entries, got {}",
                v.len()
            )));
        }
        Ok(Gains {
            raw_lambda: [v[0], v[1], v[2]],
            raw_k: [v[3], v[4], v[5]],
            raw_p: v[6..].to_vec(),
        })
    }

    /// Encodes strictly positive diagonals into raw log space.
    pub fn from_diagonals(lambda: [f64; 3], k: [f64; 3], p: &[f64]) -> Result<Gains> {
        let enc = |x: f64, name: &str| -> Result<f64> {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} diagonal entries must be positive and finite, got {x}"
                )));
            }
            Ok(x.ln())
        };
        Ok(Gains {
            raw_lambda: [
                enc(lambda[0], "Lambda")?,
                enc(lambda[1], "Lambda")?,
                enc(lambda[2], "Lambda")?,
            ],
            raw_k: [enc(k[0], "K")?, enc(k[1], "K")?, enc(k[2], "K")?],
            raw_p: p.iter().map(|&x| enc(x, "P")).collect::<Result<_>>()?,
        })
    }

    pub fn lambda(&self) -> [f64; 3] {
        self.raw_lambda.map(f64::exp)
    }

    pub fn k(&self) -> [f64; 3] {
        self.raw_k.map(f64::exp)
    }

    pub fn p_diag(&self) -> Vec<f64> {
        self.raw_p.iter().map(|&x| x.exp()).collect()
    }

    pub fn d(&self) -> usize {
        self.raw_p.len()
    }
}

/// Sliding-variable bundle at one state/reference pair.
pub struct SlidingVars<S> {
    pub qtilde: [S; 3],
    pub qdtilde: [S; 3],
    pub s: [S; 3],
    pub qd_v: [S; 3],
    pub qdd_v: [S; 3],
}

/// q~ = q - q_r, s = q~' + Lambda q~, qd_v = q'_r - Lambda q~,
/// qdd_v = q''_r - Lambda q~'.
pub fn sliding<S: Scalar>(
    q: &[S; 3],
    qd: &[S; 3],
    q_r: &[S; 3],
    qd_r: &[S; 3],
    qdd_r: &[S; 3],
    lambda: &[S; 3],
) -> SlidingVars<S> {
    let mut v = SlidingVars {
        qtilde: *q,
        qdtilde: *q,
        s: *q,
        qd_v: *q,
        qdd_v: *q,
    };
    for i in 0..3 {
        v.qtilde[i] = q[i] - q_r[i];
        v.qdtilde[i] = qd[i] - qd_r[i];
        v.s[i] = v.qdtilde[i] + lambda[i] * v.qtilde[i];
        v.qd_v[i] = qd_r[i] - lambda[i] * v.qtilde[i];
        v.qdd_v[i] = qdd_r[i] - lambda[i] * v.qdtilde[i];
    }
    v
}

/// Quadrotor control input: u = R(phi)'(qdd_v + [0, 9.81, 0]' - K s -
/// Y-hat a-hat). `yhat` is the 3 x d feature matrix already evaluated at
/// (q, q'); `ya` may be skipped by passing an empty a-hat for the nominal
/// controller.
pub fn md_control_quad<S: Scalar>(
    phi: S,
    sl: &SlidingVars<S>,
    k: &[S; 3],
    yhat: &[Vec<S>],
    ahat: &[S],
) -> [S; 3] {
    let mut f = [sl.s[0], sl.s[1], sl.s[2]];
    for i in 0..3 {
        let mut fi = sl.qdd_v[i].addc(GRAVITY[i]) - k[i] * sl.s[i];
        if !ahat.is_empty() {
            fi = fi - S::dot(&yhat[i], ahat);
        }
        f[i] = fi;
    }
    quad_tau_inverse(phi, f)
}

/// Y-hat' s for a 3 x d row-major feature matrix.
pub fn yt_s<S: Scalar>(yhat: &[Vec<S>], s: &[S; 3]) -> Vec<S> {
    let d = yhat[0].len();
    (0..d)
        .map(|j| yhat[0][j] * s[0] + yhat[1][j] * s[1] + yhat[2][j] * s[2])
        .collect()
}

/// Exact-arithmetic adaptation law:
/// a-hat' = P^{-1} diag(hess psi(P a-hat))^{-1} P^{-1} Y-hat' s.
///
/// The sign pairs with the control's -Y-hat a-hat term: with these two
/// together, d/dt d_psi(Pa || P a-hat) cancels the s' Y (a - a-hat)
/// cross term and V' = -s'Ks along the matched closed loop. Fails when
/// the potential Hessian is singular at P a-hat (epsilon = 0, p < 2, a
/// zero coordinate).
pub fn adaptation_rhs(
    ahat: &[f64],
    s: &[f64; 3],
    yhat: &[Vec<f64>],
    p_diag: &[f64],
    pot: &Potential,
) -> Result<Vec<f64>> {
    let d = ahat.len();
    debug_assert_eq!(p_diag.len(), d);
    let pa: Vec<f64> = (0..d).map(|j| p_diag[j] * ahat[j]).collect();
    let inv_h = pot.inv_hess_diag(&pa)?;
    let yts = yt_s(yhat, s);
    Ok((0..d)
        .map(|j| (yts[j] * inv_h[j]) / (p_diag[j] * p_diag[j]))
        .collect())
}

/// Tape-safe adaptation law: same expression with the smoothed Hessian, so
/// p < 2 at a zero coordinate freezes that coordinate instead of erroring.
pub fn adaptation_rhs_smooth<S: Scalar>(
    ahat: &[S],
    s: &[S; 3],
    yhat: &[Vec<S>],
    p_diag: &[S],
    p_exp: S,
    epsilon: f64,
) -> Vec<S> {
    let d = ahat.len();
    let yts = yt_s(yhat, s);
    (0..d)
        .map(|j| {
            let pa = p_diag[j] * ahat[j];
            let h = psi_hess_smooth(pa, p_exp, epsilon);
            yts[j] / h / (p_diag[j] * p_diag[j])
        })
        .collect()
}

/// Scalar-diagonal PID gains for the data-collection controller.
#[derive(Clone, Copy, Debug)]
pub struct PidGains {
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
}

impl Default for PidGains {
    fn default() -> PidGains {
        PidGains {
            kp: 10.0,
            kd: 5.0,
            ki: 1.0,
        }
    }
}

/// PID control force in generalized coordinates (before actuation):
/// u = R'([0,9.81,0]' + q''_r - Kp q~ - Kd q~' - Ki integral).
pub fn pid_formula(
    q: &[f64; 3],
    qd: &[f64; 3],
    r: ([f64; 3], [f64; 3], [f64; 3]),
    g: &PidGains,
    integral: &[f64; 3],
) -> [f64; 3] {
    let (qr, qdr, qddr) = r;
    let mut f = [0.0; 3];
    for i in 0..3 {
        let e = q[i] - qr[i];
        let ed = qd[i] - qdr[i];
        f[i] = GRAVITY[i] + qddr[i] - g.kp * e - g.kd * ed - g.ki * integral[i];
    }
    quad_tau_inverse(q[2], f)
}

/// One discrete PID evaluation: the control at (q, q') plus the integral
/// advanced by q~ dt. The collection rollout itself integrates the error
/// continuously; this entry point serves callers stepping sample by sample.
pub fn pid_control(
    q: &[f64; 3],
    qd: &[f64; 3],
    r: ([f64; 3], [f64; 3], [f64; 3]),
    g: &PidGains,
    integral: &[f64; 3],
    dt: f64,
) -> ([f64; 3], [f64; 3]) {
    let u = pid_formula(q, qd, r, g, integral);
    let mut next = *integral;
    for i in 0..3 {
        next[i] += (q[i] - r.0[i]) * dt;
    }
    (u, next)
}
