//! `dosefind`: fit, apply and evaluate dimension-reduced dose rules.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<dosefind_core::Error> for CliError {
    fn from(e: dosefind_core::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "dosefind", version, about = "Individualized dose finding with dimension reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dose rule on a CSV trial and write a model file.
    Fit {
        /// Training CSV: covariates, dose and reward columns (propensity optional).
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Recommend one dose per covariate row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Run a replicated simulation campaign; writes results.csv and summary.json.
    Simulate {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score a model on test data; writes the metrics as JSON.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Require the inverse-propensity value estimate (fails without a propensity column).
        #[arg(long)]
        ipw: bool,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Export a simulated trial as CSV.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Omit the propensity column (the simulated design is randomized with density 1/2).
        #[arg(long)]
        no_propensity: bool,
        #[command(flatten)]
        opts: Overrides,
    },
}

/// Flags that override the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat `key = value` config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulation setting, 1–5.
    #[arg(long)]
    setting: Option<u8>,
    /// `direct`, `pseudo_direct` or `no_reduction`.
    #[arg(long)]
    method: Option<String>,
    /// Structural dimension to fit.
    #[arg(long)]
    d: Option<usize>,
    /// Number of covariates (simulation).
    #[arg(long)]
    p: Option<usize>,
    /// Training sample size (simulation).
    #[arg(long)]
    n: Option<usize>,
    /// Test sample size (simulation).
    #[arg(long)]
    n_test: Option<usize>,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dose grid size.
    #[arg(long)]
    q: Option<usize>,
    /// Leave-one-out ψ.
    #[arg(long)]
    loo: bool,
    /// Random starts on the Stiefel manifold.
    #[arg(long)]
    restarts: Option<usize>,
    /// Iteration cap per start.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient-norm stopping tolerance.
    #[arg(long)]
    epsilon: Option<f64>,
    /// `silverman` or `fixed:<h>`.
    #[arg(long)]
    bandwidth: Option<String>,
    /// Comma-separated ridge penalties.
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 16] = [
            ("setting", self.setting.map(|v| v.to_string())),
            ("method", self.method.clone()),
            ("d", self.d.map(|v| v.to_string())),
            ("p", self.p.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("n_test", self.n_test.map(|v| v.to_string())),
            ("reps", self.reps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("q", self.q.map(|v| v.to_string())),
            ("loo", self.loo.then(|| "true".to_owned())),
            ("restarts", self.restarts.map(|v| v.to_string())),
            ("max_iters", self.max_iters.map(|v| v.to_string())),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("bandwidth", self.bandwidth.clone()),
            ("lambda_grid", self.lambda_grid.clone()),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = match &cli.command {
        Command::Fit { opts, .. }
        | Command::Predict { opts, .. }
        | Command::Simulate { opts, .. }
        | Command::Evaluate { opts, .. }
        | Command::Generate { opts, .. } => opts,
    };
    let cfg = opts.resolve()?;
    if let Some(t) = cfg.threads {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Fit { data, out, .. } => commands::fit(&cfg, data, out),
        Command::Predict { model, covariates, out, .. } => commands::predict(model, covariates, out),
        Command::Simulate { out, .. } => commands::simulate(&cfg, out),
        Command::Evaluate { model, data, out, ipw, .. } => commands::evaluate(&cfg, model, data, out, *ipw),
        Command::Generate { out, no_propensity, .. } => commands::generate(&cfg, out, !*no_propensity),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
