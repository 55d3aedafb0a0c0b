//! Command-line front end for the meta-learned mirror-descent pipeline.

use clap::{Parser, Subcommand};
use mdadapt::error::Result;
use mdadapt::pipeline::{
    checkpoint_path, collect_data, evaluate, exit_code, fit_ensemble, generate_verify_trajectory,
    load_config, meta_train, mode_label, run_verify, thread_pool, TrainMode, VerifyConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mdadapt",
    version,
    about = "Meta-learned mirror-descent adaptive control on a planar quadrotor"
)]
struct Cli {
    /// Worker threads for collection, fitting, and evaluation
    /// (default: MDADAPT_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the PID-driven training rollouts and write one CSV per task.
    CollectData {
        /// Experiment configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one surrogate disturbance model per collected task.
    FitEnsemble {
        #[arg(long)]
        config: PathBuf,
    },
    /// Meta-train the controller against the fitted ensemble.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        /// Learn the Bregman exponent in a second phase.
        #[arg(long, conflicts_with = "fixed_p")]
        learn_p: bool,
        /// Freeze the Bregman exponent at this value.
        #[arg(long)]
        fixed_p: Option<f64>,
    },
    /// Roll a trained checkpoint out against true wind drag and report RMS
    /// tracking error per wind speed.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint JSON produced by meta-train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated wind speeds overriding the configured list.
        #[arg(long, value_delimiter = ',')]
        winds: Option<Vec<f64>>,
    },
    /// Check a recorded oracle trajectory against the Lyapunov descent and
    /// ultimate-bound claims.
    Verify {
        /// Trajectory CSV to check (written first when --generate is set).
        #[arg(long)]
        trajectory: PathBuf,
        /// Oracle and gain description JSON.
        #[arg(long)]
        oracle_config: PathBuf,
        /// Synthesize the trajectory from the oracle config before checking.
        #[arg(long)]
        generate: bool,
        /// Stability report destination (default: trajectory with a
        /// .stability.json extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool(cli.threads)?;
    match cli.command {
        Command::CollectData { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let manifest = collect_data(&cfg, &pool)?;
            println!(
                "collected {} tasks into {}",
                manifest.tasks.len(),
                cfg.paths.data_dir.display()
            );
            for task in &manifest.tasks {
                println!("  task {}: w = {:.4} m/s -> {}", task.j, task.w, task.file);
            }
        }
        Command::FitEnsemble { config } => {
            let cfg = load_config(&config)?;
            let report = fit_ensemble(&cfg, &pool)?;
            println!("fitted {} surrogates ({} steps each)", report.tasks.len(), report.fit_steps);
            for task in &report.tasks {
                println!(
                    "  task {}: one-step loss {:.3e} (baseline {:.3e})",
                    task.j, task.one_step_loss, task.baseline_loss
                );
            }
        }
        Command::MetaTrain {
            config,
            learn_p,
            fixed_p,
        } => {
            let cfg = load_config(&config)?;
            let mode = match (learn_p, fixed_p) {
                (true, _) => Some(TrainMode::Learn),
                (false, Some(p)) => Some(TrainMode::Fixed(p)),
                (false, None) => None,
            };
            let (checkpoint, outcome) = meta_train(&cfg, mode)?;
            let label = mode_label(checkpoint.learn_p);
            println!(
                "meta-training ({label}) finished: best loss {:.6e}, p = {:.6}",
                checkpoint.best_meta_loss, checkpoint.p
            );
            println!("  checkpoint: {}", checkpoint_path(&cfg, label).display());
            println!(
                "  history: {}",
                cfg.paths.reports_dir.join(format!("history_{label}.csv")).display()
            );
            if !outcome.notes.is_empty() {
                println!("  {} divergence notes recorded", outcome.notes.len());
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            winds,
        } => {
            let cfg = load_config(&config)?;
            let report = evaluate(&cfg, &checkpoint, winds, &pool)?;
            println!("evaluation ({}): {}", report.label, report.report_file.display());
            for row in &report.rows {
                println!(
                    "  w = {:>5.2} m/s: rms {:.6e} ({})",
                    row.w,
                    row.rms,
                    if row.in_distribution { "in distribution" } else { "out of distribution" }
                );
            }
        }
        Command::Verify {
            trajectory,
            oracle_config,
            generate,
            out,
        } => {
            let vc: VerifyConfig =
                serde_json::from_str(&std::fs::read_to_string(&oracle_config)?)?;
            if generate {
                generate_verify_trajectory(&vc, &trajectory)?;
                println!("generated {}", trajectory.display());
            }
            let report = run_verify(&trajectory, &vc, out.as_deref())?;
            println!(
                "verified {}: {} descent violations over {} samples",
                trajectory.display(),
                report.violations,
                report.times.len()
            );
            if report.radius > 0.0 {
                match report.entry_time {
                    Some(t) => println!(
                        "  enters the radius {:.3e} ultimate bound at t = {t:.3} s",
                        report.radius
                    ),
                    None => println!("  never enters the radius {:.3e} set", report.radius),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
