use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covest::harness::{
    self, oracle, loglik_surface, parse_grid, reference_q, run_experiment, write_outputs, write_surface_csv,
    ExperimentConfig, HarnessError,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "covest", version, about = "Online EM estimation of model and observation error covariances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment and write per-repetition CSV and matrix JSON files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the number of repetitions.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Approximate log-likelihood on a grid of σ_Q² × σ_R² (each grid `a:b:n`).
    LoglikSurface {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        qgrid: String,
        #[arg(long)]
        rgrid: String,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the linear-Gaussian oracle battery.
    OracleCheck,
    /// Reference model-error covariance for a two-scale configuration.
    ReferenceQ {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: e.to_string(),
    }
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn run(command: Command) -> Result<(), Failure> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Run { config, out: dir, reps, seed } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(r) = reps {
                cfg.repetitions = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let result = run_experiment(&cfg)?;
            let files = write_outputs(&dir, &result)?;
            for rep in &result.repetitions {
                let s = harness::summarize_covariance(&rep.final_q);
                let line = json!({
                    "rep": rep.rep,
                    "seed": rep.seed,
                    "rmse": rep.rmse,
                    "qdiag_mean": s.diag_mean,
                    "qneigh_mean": s.neighbor_mean,
                    "qfar_mean": s.far_mean,
                    "rdiag_mean": rep.final_r.diagonal().mean(),
                    "skipped_updates": rep.skipped_updates,
                });
                writeln!(out, "{line}").map_err(io_failure)?;
            }
            for (rep, msg) in &result.failures {
                writeln!(out, "{}", json!({"rep": rep, "failed": msg})).map_err(io_failure)?;
            }
            log::info!("wrote {} files to {}", files.len(), dir.display());
            if result.repetitions.is_empty() {
                return Err(Failure {
                    kind: "run",
                    message: "every repetition failed".into(),
                });
            }
        }
        Command::LoglikSurface { config, qgrid, rgrid, out: path } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let points = loglik_surface(&cfg, &parse_grid(&qgrid)?, &parse_grid(&rgrid)?)?;
            match path {
                Some(p) => write_surface_csv(&p, &points)?,
                None => {
                    writeln!(out, "sigma_q2,sigma_r2,loglik,rmse").map_err(io_failure)?;
                    for p in &points {
                        writeln!(
                            out,
                            "{},{},{},{}",
                            p.sigma_q2,
                            p.sigma_r2,
                            p.loglik.unwrap_or(f64::NAN),
                            p.rmse.unwrap_or(f64::NAN)
                        )
                        .map_err(io_failure)?;
                    }
                }
            }
        }
        Command::OracleCheck => {
            let reports = oracle::run_battery();
            let mut failed = Vec::new();
            for r in &reports {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{tag} {}: {}", r.name, r.detail).map_err(io_failure)?;
                if !r.passed {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Failure {
                    kind: "oracle",
                    message: format!("failed checks: {}", failed.join(", ")),
                });
            }
        }
        Command::ReferenceQ { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let r = reference_q(&cfg)?;
            let doc = json!({
                "multiple": r.multiple,
                "matrix": matrix_rows(&r.matrix),
                "forcing_covariance": matrix_rows(&r.forcing_covariance),
                "candidates": r.candidates,
            });
            writeln!(out, "{doc}").map_err(io_failure)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: {}", json!({"kind": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", json!({"kind": f.kind, "message": f.message}));
            ExitCode::FAILURE
        }
    }
}
