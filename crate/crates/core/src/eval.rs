//! Subspace and policy metrics, the IPW value estimator, and the seeded
//! replication runner for the synthetic settings.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_setting, sample_setting_covariates, DoseTrial, GroundTruth, Setting};
use crate::direct::{fit_direct, DirectOptions};
use crate::error::{invalid, Error, Result};
use crate::kernel::{default_floor, global_mean, sample_sd, Bandwidth, BandwidthRule, BandwidthSpec, WeightedMean};
use crate::pseudo::{fit_pseudo_direct, no_reduction_rule, PseudoOptions};
use crate::rule::DoseRule;
use crate::stiefel::{FitReport, OptimizerOptions, OrthonormalBasis, Sense};

/// Evaluation metrics; `None` where a metric does not apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Mean true reward at the recommended doses.
    pub mean_reward: Option<f64>,
    /// Mean of `(f̂(x) - f_opt(x))²`.
    pub dose_distance: Option<f64>,
    /// `‖P_B - P_B̂‖_F`.
    pub frobenius: Option<f64>,
    /// `tr(P_B P_B̂) / d`.
    pub trace_corr: Option<f64>,
    /// Mean sample canonical correlation between `XB` and `XB̂`.
    pub canonical_corr: Option<f64>,
    /// Inverse-propensity-weighted kernel value estimate.
    pub ipw_value: Option<f64>,
}

impl MetricSet {
    /// Fills unset fields from `other`.
    pub fn merge(self, other: MetricSet) -> MetricSet {
        MetricSet {
            mean_reward: self.mean_reward.or(other.mean_reward),
            dose_distance: self.dose_distance.or(other.dose_distance),
            frobenius: self.frobenius.or(other.frobenius),
            trace_corr: self.trace_corr.or(other.trace_corr),
            canonical_corr: self.canonical_corr.or(other.canonical_corr),
            ipw_value: self.ipw_value.or(other.ipw_value),
        }
    }

    fn fields(&self) -> [Option<f64>; 6] {
        [
            self.mean_reward,
            self.dose_distance,
            self.frobenius,
            self.trace_corr,
            self.canonical_corr,
            self.ipw_value,
        ]
    }

    fn from_fields(f: [Option<f64>; 6]) -> Self {
        MetricSet {
            mean_reward: f[0],
            dose_distance: f[1],
            frobenius: f[2],
            trace_corr: f[3],
            canonical_corr: f[4],
            ipw_value: f[5],
        }
    }
}

/// `B (BᵀB)⁻¹ Bᵀ`.
pub fn projection_matrix(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = b.transpose() * b;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(format!("{}x{} basis is rank deficient", b.nrows(), b.ncols())))?;
    Ok(b * chol.solve(&b.transpose()))
}

/// Frobenius distance, trace correlation and (when `x_test` has more rows
/// than columns) the mean canonical correlation between `b_true` and `b_hat`.
pub fn subspace_metrics(b_true: &DMatrix<f64>, b_hat: &DMatrix<f64>, x_test: Option<&DMatrix<f64>>) -> Result<MetricSet> {
    if b_true.nrows() != b_hat.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "bases have {} and {} rows",
            b_true.nrows(),
            b_hat.nrows()
        )));
    }
    let p_true = projection_matrix(b_true)?;
    let p_hat = projection_matrix(b_hat)?;
    let d = b_hat.ncols() as f64;
    let frobenius = (&p_true - &p_hat).norm();
    let trace_corr = ((&p_true * &p_hat).trace() / d).clamp(0.0, 1.0);
    let canonical_corr = match x_test {
        Some(x) if x.nrows() > x.ncols() => Some(mean_canonical_correlation(&(x * b_true), &(x * b_hat))?),
        Some(x) if x.ncols() != b_true.nrows() => {
            return Err(Error::DimensionMismatch("test covariates and bases".into()))
        }
        _ => None,
    };
    Ok(MetricSet {
        frobenius: Some(frobenius),
        trace_corr: Some(trace_corr),
        canonical_corr,
        ..MetricSet::default()
    })
}

/// Mean of the `min(k_u, k_v)` sample canonical correlations between the
/// columns of `u` and `v`.
pub fn mean_canonical_correlation(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let m = u.nrows();
    if m != v.nrows() || m < 2 {
        return Err(Error::DimensionMismatch("canonical correlation needs matching rows, m >= 2".into()));
    }
    let center = |a: &DMatrix<f64>| {
        let mut a = a.clone();
        for mut c in a.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        a
    };
    let (u, v) = (center(u), center(v));
    let inv_sqrt = |s: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let eig = s.symmetric_eigen();
        let max = eig.eigenvalues.max();
        if eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * max.max(f64::MIN_POSITIVE))) {
            return Err(Error::RankDeficient("projected test covariates are collinear".into()));
        }
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
    };
    let wu = inv_sqrt(u.transpose() * &u)?;
    let wv = inv_sqrt(v.transpose() * &v)?;
    let c = wu * (u.transpose() * &v) * wv;
    let mut sv: Vec<f64> = c.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let k = u.ncols().min(v.ncols());
    Ok((sv.iter().take(k).sum::<f64>() / k as f64).clamp(0.0, 1.0))
}

/// True mean reward and squared distance to the optimal dose for given
/// recommended doses at the rows of `x_test`.
pub fn policy_metrics_from_doses(truth: &GroundTruth, doses: &[f64], x_test: &DMatrix<f64>) -> Result<MetricSet> {
    let m = x_test.nrows();
    if doses.len() != m || x_test.ncols() != truth.p() {
        return Err(Error::DimensionMismatch("test covariates, doses and ground truth".into()));
    }
    if m == 0 {
        return Ok(MetricSet::default());
    }
    let (mut reward, mut dist) = (0.0, 0.0);
    for (i, &a) in doses.iter().enumerate() {
        let row: Vec<f64> = x_test.row(i).iter().copied().collect();
        reward += truth.mean_reward(&row, a);
        dist += (a - truth.optimal_dose(&row)).powi(2);
    }
    Ok(MetricSet {
        mean_reward: Some(reward / m as f64),
        dose_distance: Some(dist / m as f64),
        ..MetricSet::default()
    })
}

pub fn policy_metrics(truth: &GroundTruth, rule: &dyn DoseRule, x_test: &DMatrix<f64>) -> Result<MetricSet> {
    if rule.covariate_dim() != x_test.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "rule expects {} covariates, test data has {}",
            rule.covariate_dim(),
            x_test.ncols()
        )));
    }
    policy_metrics_from_doses(truth, &rule.recommend_all(x_test), x_test)
}

/// Rule-of-thumb bandwidth over the `p + 1` stacked coordinates `(x, a)`,
/// each scaled by its own sample standard deviation, with dimension `p`.
pub fn ipw_bandwidth(test: &DoseTrial) -> Result<Bandwidth> {
    let x = test.covariates();
    let mut scales: Vec<f64> = (0..x.ncols()).map(|k| sample_sd(x.column(k).iter().copied())).collect();
    scales.push(sample_sd(test.doses().iter().copied()));
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidData("a test covariate or the dose has zero spread".into()));
    }
    BandwidthSpec::new(BandwidthRule::Silverman, scales)?.resolve(test.p(), test.n())
}

/// `m⁻¹ Σ_j [Σ_i R_i K_h(x_j - x_i, a_j - A_i) / P_i] / [Σ_i K_h(x_j - x_i, a_j - A_i)]`,
/// with `a_j` the recommended dose for test row `j`.
pub fn ipw_value_estimate(test: &DoseTrial, recommended: &[f64], bandwidth: &Bandwidth) -> Result<f64> {
    let prop = test
        .propensity()
        .ok_or_else(|| Error::MissingColumn("propensity".into()))?;
    let (m, p) = (test.n(), test.p());
    if recommended.len() != m {
        return Err(Error::DimensionMismatch(format!("{} recommendations for {m} test rows", recommended.len())));
    }
    if bandwidth.dim() != p + 1 {
        return Err(Error::DimensionMismatch(format!("bandwidth has {} coordinates, expected {}", bandwidth.dim(), p + 1)));
    }
    let weighted: Vec<f64> = test.rewards().iter().zip(prop).map(|(r, p)| r / p).collect();
    let fallback = global_mean(&weighted);
    let floor = default_floor(m);
    let normalizer = bandwidth.normalizer();
    let inv_h: Vec<f64> = bandwidth.per_coord().iter().map(|h| 1.0 / h).collect();
    let x = test.covariates();
    let doses = test.doses();
    let total: f64 = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut acc = WeightedMean::with_fallback(weighted[0], fallback);
            for i in 0..m {
                let mut s = 0.0;
                for k in 0..p {
                    let t = (x[(j, k)] - x[(i, k)]) * inv_h[k];
                    s += t * t;
                }
                let t = (recommended[j] - doses[i]) * inv_h[p];
                s += t * t;
                acc.add((-0.5 * s).exp(), weighted[i]);
            }
            acc.finish(normalizer, floor).value
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(total / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    PseudoDirect,
    /// Grid-kernel rule on the raw covariates.
    NoReduction,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::PseudoDirect => "pseudo_direct",
            Method::NoReduction => "no_reduction",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "pseudo_direct" | "pseudo" => Ok(Method::PseudoDirect),
            "no_reduction" => Ok(Method::NoReduction),
            _ => Err(invalid(format!("unknown method {s:?} (direct, pseudo_direct, no_reduction)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub p: usize,
    /// Structural dimension; defaults per method (see [`ExperimentConfig::dimension`]).
    pub d: Option<usize>,
    pub method: Method,
    pub reps: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub optimizer: OptimizerOptions,
    pub grid_size: Option<usize>,
    pub loo: bool,
    pub bandwidth: BandwidthRule,
}

impl ExperimentConfig {
    pub fn new(setting: Setting, method: Method) -> Self {
        Self {
            setting,
            p: 10,
            d: None,
            method,
            reps: 10,
            n_train: 400,
            n_test: 3000,
            seed: 0,
            optimizer: OptimizerOptions::default(),
            grid_size: None,
            loo: false,
            bandwidth: BandwidthRule::Silverman,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(invalid("reps must be at least 1"));
        }
        if self.p < 5 {
            return Err(invalid(format!("p must be at least 5, got {}", self.p)));
        }
        if self.n_train < 10 || self.n_test < 2 {
            return Err(invalid("need n_train >= 10 and n_test >= 2"));
        }
        if let Some(d) = self.d {
            if d < 1 || d >= self.p {
                return Err(invalid(format!("need 1 <= d < p, got d={d}")));
            }
        }
        self.optimizer.validate()
    }

    /// Fitted dimension: the rule's structural dimension for direct learning,
    /// the outcome dimension for pseudo-direct learning.
    pub fn dimension(&self) -> usize {
        self.d.unwrap_or_else(|| match self.method {
            Method::PseudoDirect => match self.setting {
                Setting::S5 => 1,
                _ => 2,
            },
            _ => self.setting.structural_dim(),
        })
    }

    /// Seed of replication `rep`; it drives the training data and the starts.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(rep as u64)
    }
}

const TEST_SEED_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// One replication: its metrics, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub metrics: MetricSet,
    pub iterations: Option<usize>,
    pub termination: Option<String>,
    /// Whether the optimizer trace respected the optimization sense.
    pub monotone: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub succeeded: usize,
    pub failed: usize,
    pub mean: MetricSet,
    /// Sample standard deviation; 0 with a single replication.
    pub sd: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub rows: Vec<RepRecord>,
    pub aggregate: Aggregate,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "setting",
    "rep",
    "seed",
    "method",
    "reward_mean",
    "dose_dist",
    "frobenius",
    "trace_corr",
    "canon_corr",
    "iterations",
    "termination",
];

fn run_replication(config: &ExperimentConfig, rep: usize) -> RepRecord {
    let seed = config.rep_seed(rep);
    match replication_metrics(config, seed) {
        Ok((metrics, report)) => RepRecord {
            rep,
            seed,
            metrics,
            iterations: report.as_ref().map(|r| r.iterations),
            termination: report.as_ref().map(|r| r.termination.to_string()),
            monotone: report.as_ref().map(|r| r.is_monotone(0.0)),
            error: None,
        },
        Err(e) => RepRecord {
            rep,
            seed,
            metrics: MetricSet::default(),
            iterations: None,
            termination: None,
            monotone: None,
            error: Some(e.to_string()),
        },
    }
}

fn replication_metrics(config: &ExperimentConfig, seed: u64) -> Result<(MetricSet, Option<FitReport>)> {
    let (train, truth) = generate_setting(config.setting, config.n_train, config.p, seed)?;
    let x_test = sample_setting_covariates(config.setting, config.n_test, config.p, seed ^ TEST_SEED_SALT);
    let d = config.dimension();
    match config.method {
        Method::Direct => {
            let opts = DirectOptions {
                optimizer: OptimizerOptions {
                    sense: Sense::Maximize,
                    ..config.optimizer
                },
                grid_size: config.grid_size,
                lambda_grid: None,
                bandwidth: config.bandwidth,
                seed,
                initial: None,
            };
            let fit = fit_direct(&train, d, &opts)?;
            let sub = subspace_metrics(&truth.basis(), fit.basis.matrix(), Some(&x_test))?;
            let pol = policy_metrics(&truth, &fit.rule, &x_test)?;
            Ok((sub.merge(pol), Some(fit.report)))
        }
        Method::PseudoDirect => {
            let opts = PseudoOptions {
                optimizer: OptimizerOptions {
                    sense: Sense::Minimize,
                    ..config.optimizer
                },
                bandwidth: config.bandwidth,
                loo: config.loo,
                grid_size: config.grid_size,
                seed,
                initial: None,
            };
            let fit = fit_pseudo_direct(&train, d, &opts)?;
            let sub = subspace_metrics(&truth.outcome_basis(), fit.basis.matrix(), Some(&x_test))?;
            let pol = policy_metrics(&truth, &fit.rule, &x_test)?;
            Ok((sub.merge(pol), Some(fit.report)))
        }
        Method::NoReduction => {
            let rule = no_reduction_rule(&train, config.grid_size, config.bandwidth)?;
            Ok((policy_metrics(&truth, &rule, &x_test)?, None))
        }
    }
}

/// Mean and sample standard deviation of each metric over the rows that
/// report it.
pub fn aggregate(rows: &[RepRecord]) -> Aggregate {
    let ok: Vec<&RepRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mut mean = [None; 6];
    let mut sd = [None; 6];
    for k in 0..6 {
        let vals: Vec<f64> = ok.iter().filter_map(|r| r.metrics.fields()[k]).collect();
        if vals.is_empty() {
            continue;
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[k] = Some(mu);
        sd[k] = Some(if vals.len() > 1 { sample_sd(vals.iter().copied()) } else { 0.0 });
    }
    Aggregate {
        succeeded: ok.len(),
        failed: rows.len() - ok.len(),
        mean: MetricSet::from_fields(mean),
        sd: MetricSet::from_fields(sd),
    }
}

/// Runs `config.reps` independent replications (in parallel) and aggregates
/// them. Failed replications are recorded, not fatal.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let rows: Vec<RepRecord> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replication(config, rep))
        .collect();
    let aggregate = aggregate(&rows);
    Ok(ExperimentResults {
        config: config.clone(),
        rows,
        aggregate,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl ExperimentResults {
    /// One row per replication, then `mean` and `sd` rows in the `rep` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RESULT_COLUMNS)?;
        let setting = self.config.setting.id().to_string();
        let method = self.config.method.as_str();
        let metric_cells = |m: &MetricSet| {
            [
                cell(m.mean_reward),
                cell(m.dose_distance),
                cell(m.frobenius),
                cell(m.trace_corr),
                cell(m.canonical_corr),
            ]
        };
        for r in &self.rows {
            let mut rec = vec![setting.clone(), r.rep.to_string(), r.seed.to_string(), method.to_string()];
            rec.extend(metric_cells(&r.metrics));
            rec.push(r.iterations.map(|i| i.to_string()).unwrap_or_default());
            rec.push(match (&r.error, &r.termination) {
                (Some(_), _) => "error".to_string(),
                (None, Some(t)) => t.clone(),
                (None, None) => String::new(),
            });
            w.write_record(&rec)?;
        }
        for (label, m) in [("mean", &self.aggregate.mean), ("sd", &self.aggregate.sd)] {
            let mut rec = vec![setting.clone(), label.to_string(), self.config.seed.to_string(), method.to_string()];
            rec.extend(metric_cells(m));
            rec.push(String::new());
            rec.push(String::new());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable `mean (sd)` table.
    pub fn format_table(&self) -> String {
        let a = &self.aggregate;
        let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.2} ({s:.2})"),
            _ => "-".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "setting {} | {} | p={} d={} | {} of {} replications succeeded",
            self.config.setting.id(),
            self.config.method,
            self.config.p,
            if self.config.method == Method::NoReduction { "-".to_string() } else { self.config.dimension().to_string() },
            a.succeeded,
            self.rows.len()
        );
        for (name, m, s) in [
            ("reward", a.mean.mean_reward, a.sd.mean_reward),
            ("dose_dist", a.mean.dose_distance, a.sd.dose_distance),
            ("frobenius", a.mean.frobenius, a.sd.frobenius),
            ("trace_corr", a.mean.trace_corr, a.sd.trace_corr),
            ("canon_corr", a.mean.canonical_corr, a.sd.canonical_corr),
        ] {
            let _ = writeln!(out, "  {name:<11} {}", fmt(m, s));
        }
        out
    }
}

/// Basis metrics for a fitted basis against a setting's ground truth.
pub fn basis_metrics(truth: &GroundTruth, b_hat: &OrthonormalBasis, x_test: Option<&DMatrix<f64>>, outcome: bool) -> Result<MetricSet> {
    let b_true = if outcome { truth.outcome_basis() } else { truth.basis() };
    subspace_metrics(&b_true, b_hat.matrix(), x_test)
}
