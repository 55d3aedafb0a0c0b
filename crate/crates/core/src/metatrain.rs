//! Bi-level meta-training: adaptive-moment gradient descent on the feature
//! map, the potential exponent and the controller gains, differentiated
//! through closed-loop rollouts against the surrogate ensemble.
//!
//! The learnable-exponent mode runs in two phases. Phase one freezes the
//! exponent at its initial value and is step-for-step identical to a
//! frozen-exponent run with the same configuration; phase two continues
//! from the best phase-one iterate with the exponent unfrozen. The returned
//! parameters are the best-loss iterate over everything evaluated, so the
//! learnable run can never end up worse than the frozen baseline it
//! contains.

use crate::autodiff::value_and_grad;
use crate::controller::Gains;
use crate::error::{Error, Result};
use crate::features::{feature_net, init_mlp, surrogate_net, Architecture, MlpParams};
use crate::optim::{Adam, AdamConfig};
use crate::reference::{random_walk_reference, Spline};
use crate::rng::{substream, substream_seed};
use crate::scalar::Scalar;
use crate::simulate::{rollout_loss, task_loss_terms, MdGains, DIVERGENCE_GUARD};
use rand_distr::{Beta, Distribution, StandardNormal};

/// Lower margin of the learnable exponent: p ranges over (1 + DELTA_P, inf),
/// keeping the inverse-Hessian adaptation law well-posed.
pub const DELTA_P: f64 = 0.05;

/// Upper end of the training wind-speed distribution, in m/s.
pub const W_MAX: f64 = 6.0;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Decoded exponent for a raw parameter value.
pub fn decode_p(raw: f64) -> f64 {
    1.0 + DELTA_P + softplus(raw)
}

/// Raw parameter whose decoded exponent equals `p` exactly when a value
/// within a few ulps achieves it, which holds for every target the decode
/// map can represent (its slope is below one near practical exponents).
pub fn raw_p_for(p: f64) -> Result<f64> {
    let margin = p - 1.0 - DELTA_P;
    if !(margin > 0.0) || !p.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "exponent must exceed {}, got {p}",
            1.0 + DELTA_P
        )));
    }
    let r0 = margin.exp_m1().ln();
    let mut best = ((decode_p(r0) - p).abs(), r0);
    let mut up = r0;
    let mut down = r0;
    for _ in 0..64 {
        up = up.next_up();
        down = down.next_down();
        for r in [up, down] {
            let err = (decode_p(r) - p).abs();
            if err < best.0 {
                best = (err, r);
            }
        }
        if best.0 == 0.0 {
            break;
        }
    }
    Ok(best.1)
}

/// Wind speeds w_j = W_MAX * Beta(5, 9) for M tasks.
pub fn sample_tasks(seed: u64, m: usize) -> Vec<f64> {
    assert!(m >= 1, "need at least one task");
    let mut rng = substream(seed, "tasks");
    let beta = Beta::new(5.0, 9.0).expect("fixed valid shape");
    (0..m).map(|_| W_MAX * beta.sample(&mut rng)).collect()
}

/// Shape and weights of the meta-objective, everything `meta_loss` needs
/// besides the parameter vector and the sampled batch.
#[derive(Clone, Debug)]
pub struct MetaSpec {
    pub arch: Architecture,
    pub d: usize,
    pub epsilon: f64,
    pub mu_ctrl: f64,
    pub mu_meta: f64,
    pub t: f64,
    pub dt: f64,
}

impl MetaSpec {
    /// Flat layout: [theta_Y, raw_p, raw Lambda(3), raw K(3), raw P(d)].
    pub fn dim(&self) -> usize {
        self.arch.n_params() + 1 + 6 + self.d
    }

    fn validate(&self, flat_len: usize) -> Result<()> {
        if self.arch.output_dim() != 3 * self.d {
            return Err(Error::DimensionMismatch(format!(
                "feature net outputs {}, need 3 x {}",
                self.arch.output_dim(),
                self.d
            )));
        }
        if flat_len != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {flat_len} entries, spec wants {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

fn decode_gains<S: Scalar>(flat: &[S], spec: &MetaSpec) -> MdGains<S> {
    let base = spec.arch.n_params();
    let raw_p = flat[base];
    let g = &flat[base + 1..];
    MdGains {
        lambda: [g[0].exp(), g[1].exp(), g[2].exp()],
        k: [g[3].exp(), g[4].exp(), g[5].exp()],
        p_diag: g[6..6 + spec.d].iter().map(|r| r.exp()).collect(),
        p_exp: raw_p.exp().addc(1.0).ln().addc(1.0 + DELTA_P),
        epsilon: spec.epsilon,
    }
}

/// One reference batch: N random-walk splines for each of the M tasks.
pub struct MetaBatch {
    pub refs: Vec<Vec<Spline>>,
}

pub fn sample_batch(seed: u64, step: u64, m: usize, n: usize, t: f64) -> Result<MetaBatch> {
    let mut refs = Vec::with_capacity(m);
    for j in 0..m {
        let mut task = Vec::with_capacity(n);
        for i in 0..n {
            let index = step * (m * n) as u64 + (j * n + i) as u64;
            task.push(random_walk_reference(
                substream_seed(seed, "metaref", index),
                t,
            )?);
        }
        refs.push(task);
    }
    Ok(MetaBatch { refs })
}

/// Meta-objective: mean task loss over the batch plus mu_meta times the
/// squared norm of the whole flat parameter vector. A diverged rollout
/// contributes the divergence guard value with no parameter gradient, and a
/// line describing it lands in `notes`.
pub fn meta_loss<S: Scalar>(
    flat: &[S],
    spec: &MetaSpec,
    batch: &MetaBatch,
    surrogates: &[MlpParams],
    notes: &mut Vec<String>,
) -> Result<S> {
    spec.validate(flat.len())?;
    if batch.refs.len() != surrogates.len() || batch.refs.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} tasks in batch, {} surrogates",
            batch.refs.len(),
            surrogates.len()
        )));
    }
    let m = batch.refs.len();
    let base = spec.arch.n_params();
    let theta = &flat[..base];
    let gains = decode_gains(flat, spec);
    let lift = |c: f64| flat[0].lift(c);
    let ahat0 = vec![0.0; spec.d];

    let mut task_sum: Option<S> = None;
    for (j, (refs, sur)) in batch.refs.iter().zip(surrogates).enumerate() {
        let sur_params: Vec<S> = sur.data.iter().map(|&c| lift(c)).collect();
        let mut terms: Vec<(S, S)> = Vec::with_capacity(refs.len());
        let mut penalties = 0usize;
        for (i, r) in refs.iter().enumerate() {
            let res = rollout_loss(
                r,
                spec.t,
                spec.dt,
                &gains,
                |s6: &[S]| feature_net(&spec.arch, theta, s6, spec.d).expect("spec validated"),
                |s6: &[S]| surrogate_net(&sur.arch, &sur_params, s6).expect("surrogate net"),
                &ahat0,
            );
            match res {
                Ok(pair) => terms.push(pair),
                Err(Error::RolloutDiverged { t, .. }) => {
                    notes.push(format!("task {j} rollout {i} diverged at t = {t:.4} s"));
                    penalties += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let task_term = if penalties == 0 {
            task_loss_terms(&terms, spec.t, spec.mu_ctrl)
        } else {
            let n = (terms.len() + penalties) as f64;
            let mut acc = lift(penalties as f64 * DIVERGENCE_GUARD / n);
            for (jt, ju) in &terms {
                acc = acc + (*jt + ju.mulc(spec.mu_ctrl)).mulc(1.0 / (spec.t * n));
            }
            acc
        };
        task_sum = Some(match task_sum {
            None => task_term,
            Some(acc) => acc + task_term,
        });
    }
    let mean = task_sum.expect("at least one task").mulc(1.0 / m as f64);

    Ok(mean + S::dot(flat, flat).mulc(spec.mu_meta))
}

/// Meta-training configuration; `hidden` lists the feature net's hidden
/// widths. Defaults are the desk-scale benchmark values.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub t: f64,
    pub dt: f64,
    pub mu_ctrl: f64,
    pub mu_meta: f64,
    pub steps: usize,
    pub lr: f64,
    pub d: usize,
    pub learn_p: bool,
    pub p_init: f64,
    pub epsilon: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            seed: 0,
            m: 10,
            n: 5,
            t: 5.0,
            dt: 0.01,
            mu_ctrl: 1e-3,
            mu_meta: 1e-4,
            steps: 500,
            lr: 1e-3,
            d: 10,
            learn_p: false,
            p_init: 2.0,
            epsilon: 1e-3,
            hidden: vec![32, 32],
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Architecture {
        let mut layers = vec![6];
        layers.extend_from_slice(&self.hidden);
        layers.push(3 * self.d);
        Architecture(layers)
    }

    pub fn spec(&self) -> MetaSpec {
        MetaSpec {
            arch: self.arch(),
            d: self.d,
            epsilon: self.epsilon,
            mu_ctrl: self.mu_ctrl,
            mu_meta: self.mu_meta,
            t: self.t,
            dt: self.dt,
        }
    }
}

/// Trained meta-parameters in raw form, with decoded views.
#[derive(Clone, Debug)]
pub struct MetaParams {
    pub theta: MlpParams,
    pub raw_p: f64,
    pub gains: Gains,
    pub epsilon: f64,
}

impl MetaParams {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.data.len() + 1 + 6 + self.gains.d());
        v.extend_from_slice(&self.theta.data);
        v.push(self.raw_p);
        v.extend_from_slice(&self.gains.raw_vec());
        v
    }

    pub fn from_flat(flat: &[f64], arch: Architecture, d: usize, seed: u64, epsilon: f64) -> Result<MetaParams> {
        let base = arch.n_params();
        if flat.len() != base + 1 + 6 + d {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} entries, layout wants {}",
                flat.len(),
                base + 1 + 6 + d
            )));
        }
        Ok(MetaParams {
            theta: MlpParams {
                arch,
                data: flat[..base].to_vec(),
                seed,
                d,
            },
            raw_p: flat[base],
            gains: Gains::from_raw_vec(&flat[base + 1..])?,
            epsilon,
        })
    }

    pub fn p(&self) -> f64 {
        decode_p(self.raw_p)
    }

    pub fn md_gains(&self) -> MdGains<f64> {
        MdGains {
            lambda: self.gains.lambda(),
            k: self.gains.k(),
            p_diag: self.gains.p_diag(),
            p_exp: self.p(),
            epsilon: self.epsilon,
        }
    }
}

/// One loss-history row, mirroring the training CSV columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub meta_loss: f64,
    pub p: f64,
    pub min_gain: f64,
    pub max_gain: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: MetaParams,
    pub history: Vec<HistoryRow>,
    pub notes: Vec<String>,
    /// Lowest recorded meta-loss; `params` is the iterate that scored it.
    pub best_loss: f64,
}

fn gain_extrema(flat: &[f64], spec: &MetaSpec) -> (f64, f64) {
    let g = decode_gains(flat, spec);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in g.lambda.iter().chain(g.k.iter()).chain(g.p_diag.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    (lo, hi)
}

struct Phase {
    best_loss: f64,
    best_flat: Vec<f64>,
    history: Vec<HistoryRow>,
    notes: Vec<String>,
}

fn run_phase(
    cfg: &TrainConfig,
    spec: &MetaSpec,
    surrogates: &[MlpParams],
    mut flat: Vec<f64>,
    frozen_p: bool,
    step_offset: usize,
) -> Result<Phase> {
    let raw_p_index = spec.arch.n_params();
    let mut adam = Adam::new(
        flat.len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut best = (f64::INFINITY, flat.clone());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut notes = Vec::new();
    for s in 0..cfg.steps {
        let step = step_offset + s;
        let batch = sample_batch(cfg.seed, step as u64, cfg.m, cfg.n, cfg.t)?;
        let mut step_notes = Vec::new();
        let evaluated = value_and_grad(&flat, |_, vars| {
            meta_loss(vars, spec, &batch, surrogates, &mut step_notes)
                .expect("spec validated before training")
        });
        for n in step_notes {
            notes.push(format!("step {step}: {n}"));
        }
        let (loss, mut grad) = match evaluated {
            Ok(pair) => pair,
            Err(e) => {
                notes.push(format!("step {step}: skipped ({e})"));
                adam.skip();
                history.push(HistoryRow {
                    step,
                    meta_loss: f64::NAN,
                    p: decode_p(flat[raw_p_index]),
                    min_gain: gain_extrema(&flat, spec).0,
                    max_gain: gain_extrema(&flat, spec).1,
                });
                continue;
            }
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            notes.push(format!("step {step}: skipped (non-finite gradient)"));
            adam.skip();
        } else {
            if loss < best.0 {
                best = (loss, flat.clone());
            }
            if frozen_p {
                grad[raw_p_index] = 0.0;
            }
            let (min_gain, max_gain) = gain_extrema(&flat, spec);
            history.push(HistoryRow {
                step,
                meta_loss: loss,
                p: decode_p(flat[raw_p_index]),
                min_gain,
                max_gain,
            });
            adam.step(&mut flat, &grad);
        }
    }
    Ok(Phase {
        best_loss: best.0,
        best_flat: best.1,
        history,
        notes,
    })
}

/// Meta-training entry point. `winds` selects one surrogate per task; both
/// must line up with `cfg.m`.
pub fn train(cfg: &TrainConfig, surrogates: &[MlpParams]) -> Result<TrainOutcome> {
    if surrogates.len() != cfg.m {
        return Err(Error::DimensionMismatch(format!(
            "{} surrogates for {} tasks",
            surrogates.len(),
            cfg.m
        )));
    }
    let spec = cfg.spec();
    let theta = init_mlp(substream_seed(cfg.seed, "theta", 0), spec.arch.clone(), cfg.d);
    let raw_p0 = raw_p_for(cfg.p_init)?;
    let mut rng = substream(cfg.seed, "gains");
    let mut jitter = || {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.2 * z
    };
    let mut raw_gains = Vec::with_capacity(6 + cfg.d);
    for _ in 0..3 {
        raw_gains.push(4.0f64.ln() + jitter());
    }
    for _ in 0..3 {
        raw_gains.push(8.0f64.ln() + jitter());
    }
    for _ in 0..cfg.d {
        raw_gains.push(0.7f64.ln() + jitter());
    }

    let mut flat = theta.data.clone();
    flat.push(raw_p0);
    flat.extend_from_slice(&raw_gains);
    spec.validate(flat.len())?;

    let phase1 = run_phase(cfg, &spec, surrogates, flat, true, 0)?;
    let (mut best_loss, mut best_flat) = (phase1.best_loss, phase1.best_flat.clone());
    let mut history = phase1.history;
    let mut notes = phase1.notes;
    if cfg.learn_p {
        let phase2 = run_phase(
            cfg,
            &spec,
            surrogates,
            phase1.best_flat,
            false,
            cfg.steps,
        )?;
        history.extend(phase2.history);
        notes.extend(phase2.notes);
        if phase2.best_loss < best_loss {
            best_loss = phase2.best_loss;
            best_flat = phase2.best_flat;
        }
    }

    let params = MetaParams::from_flat(&best_flat, spec.arch.clone(), cfg.d, theta.seed, cfg.epsilon)?;
    Ok(TrainOutcome {
        params,
        history,
        notes,
        best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            seed: 3,
            m: 1,
            n: 1,
            t: 0.5,
            dt: 0.01,
            mu_ctrl: 1e-3,
            mu_meta: 1e-4,
            steps: 3,
            lr: 1e-3,
            d: 3,
            learn_p: false,
            p_init: 2.0,
            epsilon: 1e-3,
            hidden: vec![8, 8],
        }
    }

    fn random_surrogates(count: usize, seed: u64) -> Vec<MlpParams> {
        (0..count)
            .map(|j| init_mlp(seed + j as u64, Architecture::surrogate_default(), 0))
            .collect()
    }

    /// Random nets with the output layer scaled up to wind-drag magnitudes
    /// (several m/s^2), the regime fitted surrogates live in.
    fn strong_surrogates(count: usize, seed: u64, scale: f64) -> Vec<MlpParams> {
        let mut nets = random_surrogates(count, seed);
        for net in &mut nets {
            let dims = &net.arch.0;
            let n_last = dims[dims.len() - 2] * dims[dims.len() - 1] + dims[dims.len() - 1];
            let start = net.data.len() - n_last;
            for w in &mut net.data[start..] {
                *w *= scale;
            }
        }
        nets
    }

    #[test]
    fn wind_samples_follow_the_scaled_beta() {
        let w = sample_tasks(7, 100_000);
        assert!(w.iter().all(|&x| (0.0..=W_MAX).contains(&x)));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let expected = W_MAX * 5.0 / 14.0;
        assert!(
            (mean - expected).abs() < 0.02 * expected,
            "mean {mean} vs {expected}"
        );
        assert_eq!(sample_tasks(7, 10), w[..10]);
    }

    #[test]
    fn decoded_exponent_hits_the_init_exactly() {
        let raw = raw_p_for(2.0).unwrap();
        assert_eq!(decode_p(raw), 2.0);
        let raw = raw_p_for(2.2).unwrap();
        assert!((decode_p(raw) - 2.2).abs() < 1e-15);
        assert!(raw_p_for(1.0).is_err());
    }

    #[test]
    fn flatten_and_decode_round_trip_exactly() {
        let cfg = tiny_cfg();
        let theta = init_mlp(9, cfg.arch(), cfg.d);
        let mut flat = theta.data.clone();
        flat.push(raw_p_for(2.0).unwrap());
        flat.extend((0..6 + cfg.d).map(|i| 0.1 * i as f64 - 0.3));
        let params =
            MetaParams::from_flat(&flat, cfg.arch(), cfg.d, theta.seed, cfg.epsilon).unwrap();
        assert_eq!(params.flat(), flat);
        assert_eq!(params.p(), 2.0);
        let g = params.md_gains();
        assert!(g.lambda.iter().chain(g.k.iter()).chain(g.p_diag.iter()).all(|&x| x > 0.0));
    }

    #[test]
    fn meta_loss_reduces_to_task_loss_plus_regularizer() {
        let cfg = tiny_cfg();
        let spec = cfg.spec();
        let surrogates = random_surrogates(1, 40);
        let batch = sample_batch(cfg.seed, 0, 1, 1, cfg.t).unwrap();
        let theta = init_mlp(1, spec.arch.clone(), cfg.d);
        let mut flat = theta.data.clone();
        flat.push(raw_p_for(2.0).unwrap());
        flat.extend(std::iter::repeat(0.3f64.ln()).take(6 + cfg.d));

        let mut notes = Vec::new();
        let loss = meta_loss(&flat, &spec, &batch, &surrogates, &mut notes).unwrap();
        assert!(notes.is_empty());

        let gains = decode_gains(&flat, &spec);
        let sur = &surrogates[0];
        let term = rollout_loss(
            &batch.refs[0][0],
            spec.t,
            spec.dt,
            &gains,
            |s6: &[f64]| feature_net(&spec.arch, &theta.data, s6, cfg.d).unwrap(),
            |s6: &[f64]| surrogate_net(&sur.arch, &sur.data, s6).unwrap(),
            &[0.0; 3],
        )
        .unwrap();
        let task = task_loss_terms(&[term], spec.t, spec.mu_ctrl);
        let reg: f64 = flat.iter().map(|x| x * x).sum();
        assert_eq!(loss, task + spec.mu_meta * reg);
    }

    #[test]
    fn regularizer_scales_linearly_with_its_weight() {
        let cfg = tiny_cfg();
        let surrogates = random_surrogates(1, 41);
        let batch = sample_batch(cfg.seed, 0, 1, 1, cfg.t).unwrap();
        let theta = init_mlp(2, cfg.arch(), cfg.d);
        let mut flat = theta.data.clone();
        flat.push(raw_p_for(2.0).unwrap());
        flat.extend(std::iter::repeat(0.5f64.ln()).take(6 + cfg.d));

        let mut spec = cfg.spec();
        let mut notes = Vec::new();
        spec.mu_meta = 0.0;
        let bare = meta_loss(&flat, &spec, &batch, &surrogates, &mut notes).unwrap();
        spec.mu_meta = 1e-2;
        let reg = meta_loss(&flat, &spec, &batch, &surrogates, &mut notes).unwrap();
        let expect: f64 = flat.iter().map(|x| x * x).sum();
        assert!(
            ((reg - bare) - 1e-2 * expect).abs() < 1e-12 * expect.max(1.0),
            "regularizer increment {} vs {}",
            reg - bare,
            1e-2 * expect
        );
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let spec = cfg.spec();
        let surrogates = random_surrogates(1, 42);
        let batch = sample_batch(cfg.seed, 0, 1, 1, cfg.t).unwrap();
        let theta = init_mlp(substream_seed(cfg.seed, "theta", 0), spec.arch.clone(), cfg.d);
        let mut flat = theta.data.clone();
        flat.push(raw_p_for(2.0).unwrap());
        flat.extend(std::iter::repeat(0.4f64.ln()).take(6 + cfg.d));

        let worst = grad_check(&flat, 1e-6, |_, vars| {
            let mut notes = Vec::new();
            meta_loss(vars, &spec, &batch, &surrogates, &mut notes).unwrap()
        })
        .unwrap();
        assert!(worst < 1e-4, "worst meta-gradient relative error {worst}");
    }

    #[test]
    fn divergence_is_penalized_with_zero_gradient() {
        let cfg = tiny_cfg();
        let spec = cfg.spec();
        let surrogates = random_surrogates(1, 43);
        let batch = sample_batch(cfg.seed, 0, 1, 1, cfg.t).unwrap();
        let theta = init_mlp(4, spec.arch.clone(), cfg.d);
        let mut flat = theta.data.clone();
        flat.push(raw_p_for(2.0).unwrap());
        flat.extend(std::iter::repeat(0.0f64).take(6));
        flat.extend(std::iter::repeat((1e-9f64).ln()).take(cfg.d));

        let mut notes = Vec::new();
        let (loss, grad) = value_and_grad(&flat, |_, vars| {
            meta_loss(vars, &spec, &batch, &surrogates, &mut notes).unwrap()
        })
        .unwrap();
        assert!(!notes.is_empty(), "expected a divergence note");
        assert!(loss > 0.9 * DIVERGENCE_GUARD, "penalized loss {loss}");
        let base = spec.arch.n_params();
        for i in [0, 1, 2, base, base + 1] {
            assert!(
                (grad[i] - 2.0 * spec.mu_meta * flat[i]).abs() < 1e-12,
                "coordinate {i} should only see the regularizer"
            );
        }
    }

    #[test]
    fn two_hundred_steps_cut_the_loss_by_thirty_percent() {
        let cfg = TrainConfig {
            seed: 5,
            m: 2,
            n: 1,
            t: 2.0,
            dt: 0.02,
            steps: 200,
            d: 4,
            hidden: vec![12, 12],
            ..TrainConfig::default()
        };
        let surrogates = strong_surrogates(2, 50, 30.0);
        let out = train(&cfg, &surrogates).unwrap();
        let initial = out.history[0].meta_loss;
        assert!(
            out.best_loss <= 0.7 * initial,
            "meta loss {} from {initial}",
            out.best_loss
        );
    }

    #[test]
    fn frozen_run_reports_exactly_two() {
        let cfg = tiny_cfg();
        let surrogates = random_surrogates(1, 44);
        let out = train(&cfg, &surrogates).unwrap();
        assert_eq!(out.history.len(), cfg.steps);
        for row in &out.history {
            assert_eq!(row.p, 2.0);
            assert!(row.min_gain > 0.0);
            assert!(out.best_loss <= row.meta_loss);
        }
        assert_eq!(out.params.p(), 2.0);
        let min = out
            .history
            .iter()
            .map(|r| r.meta_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_loss, min);
    }

    #[test]
    fn learnable_run_contains_the_frozen_history() {
        let cfg = TrainConfig {
            steps: 5,
            ..tiny_cfg()
        };
        let frozen = train(&cfg, &random_surrogates(1, 45)).unwrap();
        let learn_cfg = TrainConfig {
            learn_p: true,
            ..cfg.clone()
        };
        let learn = train(&learn_cfg, &random_surrogates(1, 45)).unwrap();
        assert_eq!(learn.history.len(), 2 * cfg.steps);
        for (a, b) in frozen.history.iter().zip(&learn.history) {
            assert_eq!(a, b, "shared frozen phase must match step for step");
        }
        assert!(learn.best_loss <= frozen.best_loss);
        assert!(
            learn.history[cfg.steps + 1..].iter().any(|r| r.p != 2.0),
            "the exponent never moved once unfrozen"
        );
    }

    #[test]
    fn same_seed_reproduces_training() {
        let cfg = TrainConfig {
            learn_p: true,
            steps: 4,
            ..tiny_cfg()
        };
        let a = train(&cfg, &random_surrogates(1, 46)).unwrap();
        let b = train(&cfg, &random_surrogates(1, 46)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.flat(), b.params.flat());
    }
}
