//! Experiment pipeline behind the CLI: configuration, PID data collection,
//! surrogate fitting, meta-training, evaluation with reports and plots, and
//! stability verification of recorded trajectories.

use crate::dynamics::{wind_drag, OracleDisturbance, WindDrag};
use crate::ensemble::{collect_rollout, fit_surrogate, FitConfig, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::features::{feature_net, from_json, to_json, MlpParams};
use crate::metatrain::{sample_tasks, train, MetaParams, TrainConfig, TrainOutcome};
use crate::reference::{random_walk_reference, DoubleLoop, Reference};
use crate::rng::substream_seed;
use crate::simulate::{
    read_trajectory_csv, rms, rollout_trajectory, write_trajectory_csv, MdGains, Trajectory,
    TrajectoryMeta,
};
use crate::verify::{rank_one_perturbation, vdot_bound_check, StabilityReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Substream labels hanging off the root seed, recorded in the manifest so
/// a reader can trace where each pipeline stage got its randomness.
pub const SUBSTREAMS: [&str; 8] = [
    "tasks", "collect", "waypoints", "fit", "theta", "gains", "metaref", "evalref",
];

fn default_t_collect() -> f64 {
    10.0
}

fn default_dt_collect() -> f64 {
    0.02
}

fn default_fit_steps() -> usize {
    2000
}

/// Full experiment description, normally read from a JSON file. The
/// training fields mirror [`TrainConfig`]; `architecture` lists the hidden
/// widths of the feature network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
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
    pub architecture: Vec<usize>,
    #[serde(default = "default_t_collect")]
    pub t_collect: f64,
    #[serde(default = "default_dt_collect")]
    pub dt_collect: f64,
    #[serde(default = "default_fit_steps")]
    pub fit_steps: usize,
    pub evaluation: EvaluationConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub wind_speeds: Vec<f64>,
    pub reference: ReferenceKind,
    #[serde(rename = "T_eval")]
    pub t_eval: f64,
    pub dt_eval: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    DoubleLoop,
    Spline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub models_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::InvalidConfig(format!(
                "need at least one task and one reference, got M = {}, N = {}",
                self.m, self.n
            )));
        }
        if self.evaluation.wind_speeds.is_empty() {
            return Err(Error::InvalidConfig("wind_speeds is empty".into()));
        }
        for &v in [self.t, self.dt, self.t_collect, self.dt_collect].iter() {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "horizons and steps must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, learn_p: bool, p_init: f64) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            m: self.m,
            n: self.n,
            t: self.t,
            dt: self.dt,
            mu_ctrl: self.mu_ctrl,
            mu_meta: self.mu_meta,
            steps: self.steps,
            lr: self.lr,
            d: self.d,
            learn_p,
            p_init,
            epsilon: self.epsilon,
            hidden: self.architecture.clone(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Rayon pool sized by the `--threads` flag, the MDADAPT_THREADS variable,
/// or the machine, in that order of preference.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match threads {
        Some(n) if n >= 1 => n,
        Some(n) => {
            return Err(Error::InvalidConfig(format!("thread count must be >= 1, got {n}")));
        }
        None => match std::env::var("MDADAPT_THREADS") {
            Ok(s) => s.parse().map_err(|_| {
                Error::InvalidConfig(format!("MDADAPT_THREADS must be a positive integer, got {s:?}"))
            })?,
            Err(_) => std::thread::available_parallelism().map(usize::from).unwrap_or(1),
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskEntry {
    pub j: usize,
    pub w: f64,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub substreams: Vec<String>,
    pub tasks: Vec<TaskEntry>,
}

pub fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.data_dir.join("manifest.json")
}

pub fn load_manifest(cfg: &ExperimentConfig) -> Result<Manifest> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "{} not found; run collect-data first",
            path.display()
        )));
    }
    read_json(&path)
}

/// PID data collection: one closed-loop trajectory per task, written as CSV,
/// plus the manifest tying tasks to wind speeds, seeds, and files.
pub fn collect_data(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<Manifest> {
    fs::create_dir_all(&cfg.paths.data_dir)?;
    let winds = sample_tasks(cfg.seed, cfg.m);
    let tasks: Vec<TaskEntry> = winds
        .iter()
        .enumerate()
        .map(|(j, &w)| TaskEntry {
            j,
            w,
            seed: substream_seed(cfg.seed, "collect", j as u64),
            file: format!("task_{j}.csv"),
        })
        .collect();
    pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let tr = collect_rollout(task.w, task.seed, cfg.t_collect, cfg.dt_collect)?;
                let mut buf = Vec::new();
                write_trajectory_csv(&tr, &mut buf)?;
                fs::write(cfg.paths.data_dir.join(&task.file), buf)?;
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })?;
    let manifest = Manifest {
        root_seed: cfg.seed,
        substreams: SUBSTREAMS.iter().map(|s| s.to_string()).collect(),
        tasks,
    };
    write_json(&manifest_path(cfg), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitEntry {
    pub j: usize,
    pub w: f64,
    pub one_step_loss: f64,
    pub baseline_loss: f64,
    pub model_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub fit_steps: usize,
    pub tasks: Vec<FitEntry>,
}

pub fn fit_report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.models_dir.join("fit_report.json")
}

/// Fits one surrogate disturbance model per collected task and writes the
/// model files and the fit report.
pub fn fit_ensemble(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<FitReport> {
    let manifest = load_manifest(cfg)?;
    fs::create_dir_all(&cfg.paths.models_dir)?;
    let entries = pool.install(|| {
        manifest
            .tasks
            .par_iter()
            .map(|task| {
                let csv = fs::read_to_string(cfg.paths.data_dir.join(&task.file))?;
                let tr = read_trajectory_csv(csv.as_bytes())?;
                let ds = TrajectoryDataset::from_trajectory(&tr, task.w)?;
                let fit = fit_surrogate(
                    &ds,
                    substream_seed(cfg.seed, "fit", task.j as u64),
                    &FitConfig {
                        steps: cfg.fit_steps,
                        ..FitConfig::default()
                    },
                )?;
                let model_file = format!("surrogate_{}.json", task.j);
                fs::write(
                    cfg.paths.models_dir.join(&model_file),
                    to_json(&fit.params)?,
                )?;
                Ok(FitEntry {
                    j: task.j,
                    w: task.w,
                    one_step_loss: fit.best_loss,
                    baseline_loss: fit.baseline_loss,
                    model_file,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = FitReport {
        fit_steps: cfg.fit_steps,
        tasks: entries,
    };
    write_json(&fit_report_path(cfg), &report)?;
    Ok(report)
}

fn load_surrogates(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<MlpParams>> {
    manifest
        .tasks
        .iter()
        .map(|task| {
            let path = cfg.paths.models_dir.join(format!("surrogate_{}.json", task.j));
            if !path.exists() {
                return Err(Error::InvalidConfig(format!(
                    "{} not found; run fit-ensemble first",
                    path.display()
                )));
            }
            from_json(&fs::read_to_string(path)?)
        })
        .collect()
}

/// Trained meta-parameters with their decoded views, as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_net: serde_json::Value,
    pub raw_p: f64,
    pub raw_gains: Vec<f64>,
    pub epsilon: f64,
    pub learn_p: bool,
    pub p: f64,
    pub lambda: [f64; 3],
    pub k: [f64; 3],
    pub p_diag: Vec<f64>,
    pub best_meta_loss: f64,
}

impl Checkpoint {
    pub fn from_params(params: &MetaParams, learn_p: bool, best_meta_loss: f64) -> Result<Checkpoint> {
        let gains = params.md_gains();
        Ok(Checkpoint {
            feature_net: serde_json::from_str(&to_json(&params.theta)?)?,
            raw_p: params.raw_p,
            raw_gains: params.gains.raw_vec(),
            epsilon: params.epsilon,
            learn_p,
            p: params.p(),
            lambda: gains.lambda,
            k: gains.k,
            p_diag: gains.p_diag,
            best_meta_loss,
        })
    }

    pub fn meta_params(&self) -> Result<MetaParams> {
        Ok(MetaParams {
            theta: from_json(&serde_json::to_string(&self.feature_net)?)?,
            raw_p: self.raw_p,
            gains: crate::controller::Gains::from_raw_vec(&self.raw_gains)?,
            epsilon: self.epsilon,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

/// Which exponent mode a meta-train invocation runs in.
#[derive(Clone, Copy, Debug)]
pub enum TrainMode {
    /// Exponent frozen at the given value for the whole run.
    Fixed(f64),
    Learn,
}

pub fn mode_label(learn_p: bool) -> &'static str {
    if learn_p {
        "learn"
    } else {
        "fixed"
    }
}

fn history_csv(out: &TrainOutcome) -> String {
    let mut text = String::from("step,meta_loss,p,min_gain,max_gain\n");
    for row in &out.history {
        writeln!(
            text,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            row.step, row.meta_loss, row.p, row.min_gain, row.max_gain
        )
        .expect("writing to a String");
    }
    text
}

/// Meta-training against the fitted ensemble; writes the checkpoint, the
/// loss-history CSV, and any divergence notes.
pub fn meta_train(
    cfg: &ExperimentConfig,
    mode: Option<TrainMode>,
) -> Result<(Checkpoint, TrainOutcome)> {
    let (learn_p, p_init) = match mode {
        Some(TrainMode::Fixed(p)) => (false, p),
        Some(TrainMode::Learn) => (true, cfg.p_init),
        None => (cfg.learn_p, cfg.p_init),
    };
    let manifest = load_manifest(cfg)?;
    let surrogates = load_surrogates(cfg, &manifest)?;
    let outcome = train(&cfg.train_config(learn_p, p_init), &surrogates)?;
    let checkpoint = Checkpoint::from_params(&outcome.params, learn_p, outcome.best_loss)?;

    fs::create_dir_all(&cfg.paths.models_dir)?;
    fs::create_dir_all(&cfg.paths.reports_dir)?;
    let label = mode_label(learn_p);
    write_json(&checkpoint_path(cfg, label), &checkpoint)?;
    fs::write(
        cfg.paths.reports_dir.join(format!("history_{label}.csv")),
        history_csv(&outcome),
    )?;
    let notes = if outcome.notes.is_empty() {
        String::new()
    } else {
        outcome.notes.join("\n") + "\n"
    };
    fs::write(cfg.paths.reports_dir.join(format!("notes_{label}.txt")), notes)?;
    Ok((checkpoint, outcome))
}

pub fn checkpoint_path(cfg: &ExperimentConfig, label: &str) -> PathBuf {
    cfg.paths.models_dir.join(format!("checkpoint_{label}.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub w: f64,
    pub rms: f64,
    pub in_distribution: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub report_file: PathBuf,
}

fn eval_reference(cfg: &ExperimentConfig) -> Result<Box<dyn Reference + Send + Sync>> {
    match cfg.evaluation.reference {
        ReferenceKind::DoubleLoop => Ok(Box::new(DoubleLoop::new(cfg.evaluation.t_eval))),
        ReferenceKind::Spline => Ok(Box::new(random_walk_reference(
            substream_seed(cfg.seed, "evalref", 0),
            cfg.evaluation.t_eval,
        )?)),
    }
}

/// Rolls the checkpointed controller out against the true wind-drag
/// dynamics at each requested speed; writes the per-wind report CSV and the
/// phase and state plots.
pub fn evaluate(
    cfg: &ExperimentConfig,
    checkpoint_file: &Path,
    winds: Option<Vec<f64>>,
    pool: &rayon::ThreadPool,
) -> Result<EvalReport> {
    let checkpoint = load_checkpoint(checkpoint_file)?;
    let params = checkpoint.meta_params()?;
    let gains = params.md_gains();
    let arch = params.theta.arch.clone();
    let theta = params.theta.data.clone();
    let d = params.theta.d;
    if arch.output_dim() != 3 * d || gains.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint feature net emits {} outputs for d = {} and {} gains",
            arch.output_dim(),
            d,
            gains.d()
        )));
    }
    let label = checkpoint_file
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.strip_prefix("checkpoint_").unwrap_or(s).to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    let winds = winds.unwrap_or_else(|| cfg.evaluation.wind_speeds.clone());
    if winds.is_empty() {
        return Err(Error::InvalidConfig("no wind speeds to evaluate".into()));
    }
    let reference = eval_reference(cfg)?;
    fs::create_dir_all(&cfg.paths.reports_dir)?;

    let rows = pool.install(|| {
        winds
            .par_iter()
            .map(|&w| {
                let wd = WindDrag::new(w);
                let tr = rollout_trajectory(
                    reference.as_ref(),
                    cfg.evaluation.t_eval,
                    cfg.evaluation.dt_eval,
                    &gains,
                    |s6: &[f64]| {
                        feature_net(&arch, &theta, s6, d).expect("checkpoint dimensions validated")
                    },
                    |s6: &[f64]| {
                        wind_drag(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]], &wd)
                    },
                    &vec![0.0; d],
                    TrajectoryMeta::new(format!("evaluate-{label}"), cfg.seed, &gains),
                )?;
                fs::write(
                    cfg.paths.reports_dir.join(format!("{label}_phase_w{w}.svg")),
                    phase_plot_svg(&tr, &format!("Tracking at w = {w} m/s")),
                )?;
                fs::write(
                    cfg.paths.reports_dir.join(format!("{label}_states_w{w}.svg")),
                    states_plot_svg(&tr, &format!("States at w = {w} m/s")),
                )?;
                Ok(EvalRow {
                    w,
                    rms: rms(&tr),
                    in_distribution: w <= 6.0,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut csv = String::from("w,rms,in_distribution\n");
    for row in &rows {
        writeln!(csv, "{},{:.16e},{}", row.w, row.rms, row.in_distribution)
            .expect("writing to a String");
    }
    let report_file = cfg.paths.reports_dir.join(format!("eval_{label}.csv"));
    fs::write(&report_file, csv)?;
    Ok(EvalReport {
        label,
        rows,
        report_file,
    })
}

/// Oracle closed-loop description consumed by the verify command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub oracle: OracleSpec,
    /// Operator norm of the constant feature perturbation applied to the
    /// controller's feature matrix.
    pub delta: f64,
    pub gains: GainsSpec,
    pub reference: ReferenceKind,
    #[serde(default)]
    pub reference_seed: u64,
    #[serde(rename = "T")]
    pub t_total: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSpec {
    pub seed: u64,
    pub d: usize,
    pub a_scale: f64,
    #[serde(default)]
    pub normalize_a: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainsSpec {
    pub lambda: [f64; 3],
    pub k: [f64; 3],
    pub p_diag: Vec<f64>,
    pub p_exp: f64,
    pub epsilon: f64,
}

impl GainsSpec {
    fn md_gains(&self) -> MdGains<f64> {
        MdGains {
            lambda: self.lambda,
            k: self.k,
            p_diag: self.p_diag.clone(),
            p_exp: self.p_exp,
            epsilon: self.epsilon,
        }
    }
}

fn verify_reference(cfg: &VerifyConfig) -> Result<Box<dyn Reference>> {
    match cfg.reference {
        ReferenceKind::DoubleLoop => Ok(Box::new(DoubleLoop::new(cfg.t_total))),
        ReferenceKind::Spline => Ok(Box::new(random_walk_reference(
            cfg.reference_seed,
            cfg.t_total,
        )?)),
    }
}

fn oracle_from_spec(spec: &OracleSpec) -> OracleDisturbance {
    let mut oracle = OracleDisturbance::new(spec.seed, spec.d, spec.a_scale);
    if spec.normalize_a {
        let norm = oracle.a.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut oracle.a {
            *x /= norm;
        }
    }
    oracle
}

/// Synthesizes the closed-loop oracle trajectory a verify config describes
/// and writes it as CSV.
pub fn generate_verify_trajectory(cfg: &VerifyConfig, path: &Path) -> Result<()> {
    let oracle = oracle_from_spec(&cfg.oracle);
    let gains = cfg.gains.md_gains();
    if gains.d() != cfg.oracle.d {
        return Err(Error::DimensionMismatch(format!(
            "gains carry {} diagonal entries for oracle d = {}",
            gains.d(),
            cfg.oracle.d
        )));
    }
    let reference = verify_reference(cfg)?;
    let dy = rank_one_perturbation(cfg.oracle.d, cfg.delta);
    let tr = rollout_trajectory(
        reference.as_ref(),
        cfg.t_total,
        cfg.dt,
        &gains,
        |s6: &[f64]| {
            let mut y = oracle.features(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]]);
            for (row, drow) in y.iter_mut().zip(&dy) {
                for (x, dx) in row.iter_mut().zip(drow) {
                    *x += dx;
                }
            }
            y
        },
        |s6: &[f64]| oracle.value(&[s6[0], s6[1], s6[2]], &[s6[3], s6[4], s6[5]]),
        &vec![0.0; cfg.oracle.d],
        TrajectoryMeta::new("verify-oracle", cfg.oracle.seed, &gains),
    )?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut buf = Vec::new();
    write_trajectory_csv(&tr, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Checks a recorded oracle trajectory against the descent and ultimate
/// bounds and writes the stability report JSON. Fails with a verification
/// error when the trajectory misses the claimed bounds.
pub fn run_verify(
    trajectory: &Path,
    config: &VerifyConfig,
    out: Option<&Path>,
) -> Result<StabilityReport> {
    let oracle = oracle_from_spec(&config.oracle);
    let gains = config.gains.md_gains();
    let csv = fs::read_to_string(trajectory)?;
    let mut tr = read_trajectory_csv(csv.as_bytes())?;
    if tr.d() != config.oracle.d {
        return Err(Error::DimensionMismatch(format!(
            "trajectory carries {} adaptation states, oracle d = {}",
            tr.d(),
            config.oracle.d
        )));
    }
    let reference = verify_reference(config)?;
    for (k, &t) in tr.times.iter().enumerate() {
        let (_, qd_r, _) = reference.eval(t);
        tr.qd_r[k] = qd_r;
    }
    let report = vdot_bound_check(&tr, &oracle.a, config.delta, &gains)?;

    let default_out = trajectory.with_extension("stability.json");
    write_json(out.unwrap_or(&default_out), &report)?;

    let n = report.times.len();
    if report.radius == 0.0 {
        let final_err = tr
            .q
            .last()
            .unwrap()
            .iter()
            .zip(tr.q_r.last().unwrap())
            .map(|(q, qr)| (q - qr).powi(2))
            .sum::<f64>()
            .sqrt();
        if report.violations > 0 {
            return Err(Error::VerificationFailed(format!(
                "{} descent violations with exact features",
                report.violations
            )));
        }
        if final_err >= 1e-3 {
            return Err(Error::VerificationFailed(format!(
                "final tracking error {final_err:.3e} did not converge"
            )));
        }
    } else {
        if !report.contained {
            return Err(Error::VerificationFailed(format!(
                "tracking error never settles inside the radius {:.3e} set",
                report.radius
            )));
        }
        if report.violations > n / 100 {
            return Err(Error::VerificationFailed(format!(
                "{} of {n} samples violate the descent bound",
                report.violations
            )));
        }
    }
    Ok(report)
}

/// Process exit code for an error, per the CLI contract: 1 for usage,
/// configuration, and I/O problems, 2 for numerical failures, 3 for
/// verification failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::Io(_) | Error::Json(_) => 1,
        Error::VerificationFailed(_) => 3,
        _ => 2,
    }
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel_svg(
    out: &mut String,
    origin: (f64, f64),
    size: (f64, f64),
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
) {
    let (x0, y0) = origin;
    let (w, h) = size;
    let (ml, mr, mt, mb) = (62.0, 16.0, 30.0, 42.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (x, y) in finite {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = hi - lo;
        if span > 0.0 {
            (lo - 0.05 * span, hi + 0.05 * span)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (xmin, xmax) = pad(xmin, xmax);
    let (ymin, ymax) = pad(ymin, ymax);
    let sx = |x: f64| x0 + ml + (x - xmin) / (xmax - xmin) * plot_w;
    let sy = |y: f64| y0 + mt + (ymax - y) / (ymax - ymin) * plot_h;

    writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#444"/>"##,
        x0 + ml,
        y0 + mt
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" font-weight="bold">{title}</text>"#,
        x0 + ml,
        y0 + mt - 10.0
    )
    .unwrap();
    for i in 0..=4 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        let px = sx(fx);
        let py = sy(fy);
        writeln!(
            out,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#444"/>"##,
            y0 + mt + plot_h,
            y0 + mt + plot_h + 4.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{fx:.2}</text>"#,
            y0 + mt + plot_h + 16.0
        )
        .unwrap();
        writeln!(
            out,
            r##"<line x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#444"/>"##,
            x0 + ml - 4.0,
            x0 + ml
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{fy:.2}</text>"#,
            x0 + ml - 7.0,
            py + 3.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{xlabel}</text>"#,
        x0 + ml + plot_w / 2.0,
        y0 + h - 8.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{ylabel}</text>"#,
        x0 + 14.0,
        y0 + mt + plot_h / 2.0,
        x0 + 14.0,
        y0 + mt + plot_h / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.3"/>"#,
            pts.join(" "),
            s.color
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{}" text-anchor="end">{}</text>"#,
            x0 + ml + plot_w - 8.0,
            y0 + mt + 15.0 + 14.0 * i as f64,
            s.color,
            s.label
        )
        .unwrap();
    }
}

fn svg_document(width: f64, height: f64, body: &str) -> String {
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" "#,
            r#"viewBox="0 0 {w} {h}">"#,
            "\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{body}</svg>\n"
        ),
        w = width,
        h = height,
        body = body
    )
}

const ACTUAL_COLOR: &str = "#1f77b4";
const REFERENCE_COLOR: &str = "#d62728";

/// x-y phase portrait of the actual and reference motion.
pub fn phase_plot_svg(tr: &Trajectory, title: &str) -> String {
    let actual: Vec<(f64, f64)> = tr.q.iter().map(|q| (q[0], q[1])).collect();
    let reference: Vec<(f64, f64)> = tr.q_r.iter().map(|q| (q[0], q[1])).collect();
    let mut body = String::new();
    panel_svg(
        &mut body,
        (0.0, 0.0),
        (640.0, 480.0),
        title,
        "x [m]",
        "y [m]",
        &[
            Series {
                label: "actual",
                color: ACTUAL_COLOR,
                points: actual,
            },
            Series {
                label: "reference",
                color: REFERENCE_COLOR,
                points: reference,
            },
        ],
    );
    svg_document(640.0, 480.0, &body)
}

/// Time histories of x, y, and phi against their references, stacked.
pub fn states_plot_svg(tr: &Trajectory, title: &str) -> String {
    let names = ["x [m]", "y [m]", "phi [rad]"];
    let mut body = String::new();
    for i in 0..3 {
        let actual: Vec<(f64, f64)> = tr.times.iter().zip(&tr.q).map(|(&t, q)| (t, q[i])).collect();
        let reference: Vec<(f64, f64)> =
            tr.times.iter().zip(&tr.q_r).map(|(&t, q)| (t, q[i])).collect();
        let panel_title = if i == 0 { title } else { "" };
        panel_svg(
            &mut body,
            (0.0, 250.0 * i as f64),
            (640.0, 250.0),
            panel_title,
            "t [s]",
            names[i],
            &[
                Series {
                    label: "actual",
                    color: ACTUAL_COLOR,
                    points: actual,
                },
                Series {
                    label: "reference",
                    color: REFERENCE_COLOR,
                    points: reference,
                },
            ],
        );
    }
    svg_document(640.0, 750.0, &body)
}
