use std::io::Write as _;
use std::path::Path;

use dosefind_core::dataset::read_covariates;
use dosefind_core::eval::{basis_metrics, ipw_bandwidth, ipw_value_estimate, policy_metrics_from_doses};
use dosefind_core::pseudo::no_reduction_rule;
use dosefind_core::{
    fit_direct, fit_pseudo_direct, generate_setting, load_trial, run_experiment, DirectOptions, DoseTrial,
    ExperimentConfig, FitReport, GroundTruth, Method, MetricSet, PseudoOptions, Schema, Sense, Termination,
};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::model::{FittedRule, Model, FORMAT, VERSION};
use crate::CliError;

/// Dimension fitted by `fit` when none is configured.
const DEFAULT_FIT_DIM: usize = 2;

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed command never leaves a truncated file behind.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn schema(cfg: &RunConfig, covariates: Option<Vec<String>>) -> Schema {
    Schema {
        covariates,
        dose: cfg.dose_column.clone(),
        reward: cfg.reward_column.clone(),
        propensity: cfg.propensity_column.clone(),
        dose_min: cfg.dose_min,
        dose_max: cfg.dose_max,
    }
}

fn load(path: &Path, schema: &Schema) -> Result<DoseTrial, CliError> {
    load_trial(path, schema).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Zero accepted steps with a failed line search means the start was never
/// improved upon; starts are ranked by final objective, so the reported
/// start is stuck only when every start was.
fn check_progress(report: &FitReport) -> Result<(), CliError> {
    if report.iterations == 0 && report.termination == Termination::NoImprovingStep {
        return Err(CliError::Numerical("no improving step from any start".into()));
    }
    Ok(())
}

pub fn fit(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let trial = load(data, &schema(cfg, None))?;
    let d = cfg.d.unwrap_or(DEFAULT_FIT_DIM);
    let (basis, objective, report, rule) = match cfg.method {
        Method::Direct => {
            let opts = DirectOptions {
                optimizer: dosefind_core::OptimizerOptions {
                    sense: Sense::Maximize,
                    ..cfg.optimizer()
                },
                grid_size: cfg.q,
                lambda_grid: cfg.lambda_grid.clone(),
                bandwidth: cfg.bandwidth,
                seed: cfg.seed,
                initial: None,
            };
            let f = fit_direct(&trial, d, &opts)?;
            (Some(f.basis), Some(f.value), Some(f.report), FittedRule::KernelRidge(f.rule))
        }
        Method::PseudoDirect => {
            let opts = PseudoOptions {
                optimizer: dosefind_core::OptimizerOptions {
                    sense: Sense::Minimize,
                    ..cfg.optimizer()
                },
                bandwidth: cfg.bandwidth,
                loo: cfg.loo,
                grid_size: cfg.q,
                seed: cfg.seed,
                initial: None,
            };
            let f = fit_pseudo_direct(&trial, d, &opts)?;
            (Some(f.basis), Some(f.psi), Some(f.report), FittedRule::GridKernel(f.rule))
        }
        Method::NoReduction => {
            let rule = no_reduction_rule(&trial, cfg.q, cfg.bandwidth)?;
            (None, None, None, FittedRule::GridKernel(rule))
        }
    };
    if let Some(r) = &report {
        check_progress(r)?;
    }
    let model = Model {
        format: FORMAT.into(),
        version: VERSION,
        method: cfg.method,
        covariate_names: trial.covariate_names().to_vec(),
        dose_range: trial.dose_range(),
        basis,
        objective,
        report,
        rule,
        config: cfg.clone(),
    };
    write_atomic(out, model.to_json()?.as_bytes())
}

/// Picks the model's covariates out of a CSV header: by name when every
/// training name is present, otherwise positionally when the widths agree.
fn select_columns(model: &Model, header: &[String], x: &DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
    let by_name: Option<Vec<usize>> = model
        .covariate_names
        .iter()
        .map(|n| header.iter().position(|h| h == n))
        .collect();
    let cols = match by_name {
        Some(cols) => cols,
        None if header.len() == model.p() => (0..header.len()).collect(),
        None => {
            return Err(CliError::Input(format!(
                "covariates file has {} columns, model expects {} ({})",
                header.len(),
                model.p(),
                model.covariate_names.join(", ")
            )))
        }
    };
    Ok(x.select_columns(&cols))
}

pub fn predict(model_path: &Path, covariates: &Path, out: &Path) -> Result<(), CliError> {
    let model = Model::load(model_path)?;
    let bytes = std::fs::read(covariates)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", covariates.display())))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return write_atomic(out, b"");
    }
    let (header, x) = read_covariates(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", covariates.display())))?;
    let x = select_columns(&model, &header, &x)?;
    let mut text = String::from("dose\n");
    for v in model.predict(&x) {
        text.push_str(&format!("{v}\n"));
    }
    write_atomic(out, text.as_bytes())
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let exp = ExperimentConfig {
        setting: cfg.require_setting()?,
        p: cfg.p,
        d: cfg.d,
        method: cfg.method,
        reps: cfg.reps,
        n_train: cfg.n,
        n_test: cfg.n_test,
        seed: cfg.seed,
        optimizer: cfg.optimizer(),
        grid_size: cfg.q,
        loo: cfg.loo,
        bandwidth: cfg.bandwidth,
    };
    exp.validate()?;
    let results = run_experiment(&exp)?;

    let mut csv = Vec::new();
    results.write_csv(&mut csv)?;
    let mut summary = results.summary_json()?;
    summary.push('\n');
    std::fs::create_dir_all(out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    write_atomic(&out.join("results.csv"), &csv)?;
    write_atomic(&out.join("summary.json"), summary.as_bytes())?;
    write_atomic(&out.join("config.txt"), cfg.to_canonical().as_bytes())?;
    print!("{}", results.format_table());

    for row in results.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("replication {} failed: {}", row.rep, row.error.as_deref().unwrap_or(""));
    }
    if results.aggregate.succeeded == 0 {
        return Err(CliError::Numerical("every replication failed".into()));
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path, require_ipw: bool) -> Result<(), CliError> {
    let model = Model::load(model_path)?;
    let trial = load(data, &schema(cfg, Some(model.covariate_names.clone())))?;
    let x = trial.covariates();
    let doses = model.predict(x);

    let mut metrics = MetricSet::default();
    if trial.propensity().is_some() {
        let bw = ipw_bandwidth(&trial)?;
        metrics.ipw_value = Some(ipw_value_estimate(&trial, &doses, &bw)?);
    } else if require_ipw {
        return Err(CliError::Input(format!("{} has no propensity column", data.display())));
    }
    if let Some(setting) = cfg.setting()? {
        let truth = GroundTruth::new(setting, model.p())?;
        metrics = metrics.merge(policy_metrics_from_doses(&truth, &doses, x)?);
        if let Some(b) = &model.basis {
            let outcome = model.method == Method::PseudoDirect;
            metrics = metrics.merge(basis_metrics(&truth, b, Some(x), outcome)?);
        }
    }
    let mut json = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Numerical(e.to_string()))?;
    json.push('\n');
    write_atomic(out, json.as_bytes())
}

pub fn generate(cfg: &RunConfig, out: &Path, with_propensity: bool) -> Result<(), CliError> {
    let setting = cfg.require_setting()?;
    let (trial, _) = generate_setting(setting, cfg.n, cfg.p, cfg.seed)?;
    let trial = if with_propensity {
        trial
    } else {
        let (lo, hi) = trial.dose_range();
        DoseTrial::with_range(trial.covariates().clone(), trial.doses().to_vec(), trial.rewards().to_vec(), None, lo, hi)?
            .with_covariate_names(trial.covariate_names().to_vec())?
    };
    let mut buf = Vec::new();
    trial.write_csv(&mut buf)?;
    write_atomic(out, &buf)
}
