use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dc_cli::config::ExperimentConfig;
use dc_cli::sweep::run_sweep;
use dc_cli::validate::{print_rows, run_validate, ValidateOptions};
use dc_core::targets::{builtin_target, moment_oracle};
use dc_core::{MapKind, Method, TargetSpec};

#[derive(Parser)]
#[command(name = "dc", version, about = "Divide-and-couple variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid.
    Run {
        /// JSON experiment configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Run a single seed instead of the configured ones.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check estimator-coupling validity by quadrature on a 1D target.
    Validate {
        #[arg(long)]
        target: TargetSpec,
        /// Comma-separated batch methods.
        #[arg(long, value_delimiter = ',', default_value = "iid,anti,strat")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, value_delimiter = ',', default_value = "cartesian")]
        maps: Vec<MapKind>,
        /// Cells per axis piece.
        #[arg(long, default_value_t = 200)]
        quad_points: usize,
        /// Also check deliberately broken couplings, which must fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Print the moment oracle of a target as JSON.
    Oracle {
        #[arg(long)]
        target: TargetSpec,
        /// Importance-sampling draws when no quadrature is available.
        #[arg(long, default_value_t = 1 << 22)]
        budget: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, out, jobs, seed } => {
            let cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.resolved_seeds()?,
            };
            let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("dc_out"));
            let summary = run_sweep(&cfg, &seeds, &out, jobs)?;
            eprintln!("{} cells, {} failed; results in {}", summary.cells, summary.failed_cells, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { target, methods, m, maps, quad_points, corrupt } => {
            let rows = run_validate(&ValidateOptions { target, methods, m, maps, quad_points, corrupt })?;
            print_rows(&rows);
            Ok(if rows.iter().all(|r| r.passed()) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Oracle { target, budget } => {
            let t = builtin_target(&target)?;
            let oracle = moment_oracle(&t, budget).context("computing the moment oracle")?;
            println!("{}", serde_json::to_string_pretty(&oracle)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
