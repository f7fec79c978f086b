//! Direct learning: alternate between fitting the dose rule at a fixed basis
//! and one ascent step of the kernel-estimated value function at a fixed rule.
//!
//! Rule step, at basis `B`:
//! 1. pseudo-doses `Ã_i = argmax_{a ∈ grid} R̂_i(a, B)`, where `R̂_i` is the
//!    Nadaraya-Watson reward estimate at `(Bᵀx_i, a)`;
//! 2. kernel ridge regression of `Ã` on `BᵀX`, with the penalty chosen by GCV.
//!
//! Basis step, at rule `f`: numeric gradient of
//! `V(B) = n⁻¹ Σ_j NW[(BᵀX_i, A_i) → R_i]((Bᵀx_j, f(Bᵀx_j)))`, then a Cayley
//! line search (see [`crate::stiefel`]).

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DoseTrial;
use crate::error::{invalid, Error, Result};
use crate::kernel::{default_floor, reduced_dose_bandwidth, Bandwidth, BandwidthRule, WeightedMean};
use crate::rule::DoseRule;
use crate::stiefel::{
    line_search, numeric_gradient, random_starts, select_best, skew_update_matrix, FitReport,
    LineSearchOutcome, Objective, OptimizerOptions, OrthonormalBasis, Sense, Termination,
};
use crate::surface::RewardSurface;

/// Relative tolerance on the ridge normal equations.
pub const RIDGE_RESIDUAL_TOL: f64 = 1e-8;
/// Penalty used when an unpenalized ridge system is singular.
pub const RIDGE_LAMBDA_FLOOR: f64 = 1e-8;

/// Uniformly spaced doses from the smallest to the largest observed dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    points: Vec<f64>,
}

impl DoseGrid {
    pub fn uniform(lo: f64, hi: f64, q: usize) -> Result<Self> {
        if q < 2 {
            return Err(invalid(format!("dose grid needs at least 2 points, got {q}")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidData(format!("degenerate dose range [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (q - 1) as f64;
        let mut points: Vec<f64> = (0..q).map(|j| lo + j as f64 * step).collect();
        points[q - 1] = hi;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Default grid size `⌈√n⌉`.
pub fn default_grid_size(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

pub fn dose_grid(trial: &DoseTrial, q: Option<usize>) -> Result<DoseGrid> {
    let doses = trial.doses();
    let lo = doses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = doses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    DoseGrid::uniform(lo, hi, q.unwrap_or_else(|| default_grid_size(trial.n())))
}

/// Row-major copy of an `n × k` matrix.
pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Grid pseudo-doses `Ã_i` at basis `b`.
pub fn pseudo_dose_targets(trial: &DoseTrial, b: &OrthonormalBasis, grid: &DoseGrid, bandwidth: &Bandwidth) -> Result<Vec<f64>> {
    pseudo_dose_targets_counted(trial, b.matrix(), grid, bandwidth).map(|(t, _)| t)
}

fn pseudo_dose_targets_counted(
    trial: &DoseTrial,
    b: &DMatrix<f64>,
    grid: &DoseGrid,
    bandwidth: &Bandwidth,
) -> Result<(Vec<f64>, usize)> {
    let d = b.ncols();
    if bandwidth.dim() != d + 1 {
        return Err(Error::DimensionMismatch(format!(
            "bandwidth has {} coordinates, expected {}",
            bandwidth.dim(),
            d + 1
        )));
    }
    let z = crate::stiefel::project_rows(trial.covariates(), b);
    let surface = RewardSurface::new(
        &z,
        d,
        trial.doses(),
        trial.rewards(),
        bandwidth,
        grid.points(),
        default_floor(trial.n()),
    );
    let out: Vec<(f64, bool)> = (0..trial.n())
        .into_par_iter()
        .map(|i| surface.argmax(&z[i * d..(i + 1) * d]))
        .collect();
    let fallbacks = out.iter().filter(|(_, f)| *f).count();
    Ok((out.into_iter().map(|(a, _)| a).collect(), fallbacks))
}

/// `f(z) = Σ_j w_j exp(-‖z - Z_j‖² / (2σ²))` on the reduced space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFunction {
    dim: usize,
    /// Row-major `n × dim` anchors.
    anchors: Vec<f64>,
    weights: Vec<f64>,
    rbf_scale: f64,
    lambda: f64,
}

impl RidgeFunction {
    pub fn from_parts(anchors: &DMatrix<f64>, weights: Vec<f64>, rbf_scale: f64, lambda: f64) -> Result<Self> {
        let f = Self {
            dim: anchors.ncols(),
            anchors: row_major(anchors),
            weights,
            rbf_scale,
            lambda,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.weights.is_empty() || self.anchors.len() != self.dim * self.weights.len() {
            return Err(Error::DimensionMismatch("ridge anchors and weights disagree".into()));
        }
        if !(self.rbf_scale > 0.0 && self.rbf_scale.is_finite()) {
            return Err(invalid(format!("rbf scale must be positive, got {}", self.rbf_scale)));
        }
        if self.anchors.iter().chain(&self.weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("ridge function has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rbf_scale(&self) -> f64 {
        self.rbf_scale
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn anchors(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.weights.len(), self.dim, &self.anchors)
    }

    #[inline]
    pub fn eval(&self, z: &[f64]) -> f64 {
        let c = -0.5 / (self.rbf_scale * self.rbf_scale);
        self.weights
            .iter()
            .zip(self.anchors.chunks_exact(self.dim))
            .map(|(w, a)| {
                let s: f64 = a.iter().zip(z).map(|(a, z)| (z - a) * (z - a)).sum();
                w * (c * s).exp()
            })
            .sum()
    }

    /// `‖(K + λI) w - t‖` for the training targets `t`.
    pub fn normal_equation_residual(&self, targets: &[f64]) -> f64 {
        let k = rbf_gram(&self.anchors(), self.rbf_scale);
        let w = nalgebra::DVector::from_column_slice(&self.weights);
        let lhs = k * &w + &w * self.lambda;
        (lhs - nalgebra::DVector::from_column_slice(targets)).norm()
    }
}

/// `K_ij = exp(-‖z_i - z_j‖² / (2σ²))`.
pub fn rbf_gram(z: &DMatrix<f64>, rbf_scale: f64) -> DMatrix<f64> {
    let n = z.nrows();
    let c = -0.5 / (rbf_scale * rbf_scale);
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..z.ncols()).map(|l| (z[(i, l)] - z[(j, l)]).powi(2)).sum();
            let v = (c * s).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Median pairwise Euclidean distance between rows; 1 when all rows coincide.
pub fn median_heuristic(z: &DMatrix<f64>) -> f64 {
    let n = z.nrows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push((z.row(i) - z.row(j)).norm());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Solves `(K + λI) w = targets` by Cholesky, with one step of iterative
/// refinement when the residual is above tolerance.
pub fn fit_kernel_ridge(z: &DMatrix<f64>, targets: &[f64], lambda: f64, rbf_scale: f64) -> Result<RidgeFunction> {
    let n = z.nrows();
    if n == 0 || targets.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} anchors for {} targets", targets.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    if !(rbf_scale > 0.0 && rbf_scale.is_finite()) {
        return Err(invalid(format!("rbf scale must be positive, got {rbf_scale}")));
    }
    let mut a = rbf_gram(z, rbf_scale);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let t = nalgebra::DVector::from_column_slice(targets);
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularSystem(format!("K + {lambda}·I is not positive definite")))?;
    let mut w = chol.solve(&t);
    let tol = RIDGE_RESIDUAL_TOL * t.norm();
    let mut r = &t - &a * &w;
    if r.norm() > tol {
        w += chol.solve(&r);
        r = &t - &a * &w;
    }
    if !(r.norm() <= tol) {
        return Err(Error::SingularSystem(format!(
            "ridge residual {:e} exceeds {:e} at lambda {lambda}",
            r.norm(),
            tol
        )));
    }
    RidgeFunction::from_parts(z, w.iter().copied().collect(), rbf_scale, lambda)
}

/// [`fit_kernel_ridge`], retrying a singular unpenalized system at
/// [`RIDGE_LAMBDA_FLOOR`].
pub fn fit_kernel_ridge_floored(z: &DMatrix<f64>, targets: &[f64], lambda: f64, rbf_scale: f64) -> Result<RidgeFunction> {
    match fit_kernel_ridge(z, targets, lambda, rbf_scale) {
        Err(Error::SingularSystem(_)) if lambda < RIDGE_LAMBDA_FLOOR => {
            fit_kernel_ridge(z, targets, RIDGE_LAMBDA_FLOOR, rbf_scale)
        }
        other => other,
    }
}

/// `n · [1e-4, 1e2]`, ten log-spaced points.
pub fn default_lambda_grid(n: usize) -> Vec<f64> {
    let (lo, hi, count) = (1e-4f64.ln(), 1e2f64.ln(), 10);
    (0..count)
        .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp() * n as f64)
        .collect()
}

/// GCV scores `n‖(I - S_λ)t‖² / tr(I - S_λ)²` for each λ, via one
/// eigendecomposition of `K`.
pub fn gcv_scores(z: &DMatrix<f64>, targets: &[f64], lambda_grid: &[f64], rbf_scale: f64) -> Result<Vec<f64>> {
    let n = z.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch("targets length".into()));
    }
    let eig = SymmetricEigen::new(rbf_gram(z, rbf_scale));
    let coef = eig.eigenvectors.transpose() * nalgebra::DVector::from_column_slice(targets);
    Ok(lambda_grid
        .iter()
        .map(|&lambda| {
            let mut rss = 0.0;
            let mut tr = 0.0;
            for (mu, c) in eig.eigenvalues.iter().zip(coef.iter()) {
                let shrink = lambda / (mu.max(0.0) + lambda);
                rss += (shrink * c).powi(2);
                tr += shrink;
            }
            n as f64 * rss / (tr * tr)
        })
        .collect())
}

/// GCV-minimizing penalty; ties go to the larger λ.
pub fn gcv_select_lambda(z: &DMatrix<f64>, targets: &[f64], lambda_grid: &[f64], rbf_scale: f64) -> Result<f64> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(invalid("lambda grid must be non-empty and positive"));
    }
    let scores = gcv_scores(z, targets, lambda_grid, rbf_scale)?;
    let mut best: Option<(f64, f64)> = None;
    for (&lambda, &score) in lambda_grid.iter().zip(&scores) {
        if !score.is_finite() {
            continue;
        }
        best = match best {
            None => Some((lambda, score)),
            Some((bl, bs)) if score < bs || (score == bs && lambda > bl) => Some((lambda, score)),
            keep => keep,
        };
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::SingularSystem("every GCV score is non-finite".into()))
}

/// Kernel-estimated value of a reduced-space rule as a function of the basis
/// (defined off the manifold too, for finite-difference probes).
pub struct ValueObjective<'a, F> {
    x: &'a DMatrix<f64>,
    doses: &'a [f64],
    rewards: &'a [f64],
    rule: F,
    inv_h: Vec<f64>,
    normalizer: f64,
    floor: f64,
    fallback_mean: f64,
}

impl<'a, F: Fn(&[f64]) -> f64 + Sync> ValueObjective<'a, F> {
    pub fn new(trial: &'a DoseTrial, rule: F, bandwidth: &Bandwidth) -> Self {
        Self {
            x: trial.covariates(),
            doses: trial.doses(),
            rewards: trial.rewards(),
            rule,
            inv_h: bandwidth.per_coord().iter().map(|h| 1.0 / h).collect(),
            normalizer: bandwidth.normalizer(),
            floor: default_floor(trial.n()),
            fallback_mean: crate::kernel::global_mean(trial.rewards()),
        }
    }

    /// `(V(B), number of fallback denominators)`.
    pub fn evaluate(&self, b: &DMatrix<f64>) -> (f64, usize) {
        let n = self.rewards.len();
        let d = b.ncols();
        let z = row_major(&(self.x * b));
        let inv_ha = self.inv_h[d];
        let mut total = 0.0;
        let mut fallbacks = 0;
        for j in 0..n {
            let zj = &z[j * d..(j + 1) * d];
            let fj = (self.rule)(zj);
            let mut acc = WeightedMean::with_fallback(self.rewards[0], self.fallback_mean);
            for i in 0..n {
                let zi = &z[i * d..(i + 1) * d];
                let mut s = 0.0;
                for l in 0..d {
                    let t = (zj[l] - zi[l]) * self.inv_h[l];
                    s += t * t;
                }
                let t = (fj - self.doses[i]) * inv_ha;
                s += t * t;
                acc.add((-0.5 * s).exp(), self.rewards[i]);
            }
            let est = acc.finish(self.normalizer, self.floor);
            fallbacks += est.fallback as usize;
            total += est.value;
        }
        (total / n as f64, fallbacks)
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for ValueObjective<'_, F> {
    fn value(&self, b: &DMatrix<f64>) -> f64 {
        self.evaluate(b).0
    }

    fn fallbacks(&self, b: &DMatrix<f64>) -> usize {
        self.evaluate(b).1
    }
}

/// Empirical value of the reduced-space rule `rule` at basis `b`.
pub fn empirical_value<F>(trial: &DoseTrial, b: &OrthonormalBasis, rule: F, bandwidth: &Bandwidth) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if b.p() != trial.p() || bandwidth.dim() != b.d() + 1 {
        return Err(Error::DimensionMismatch("basis, trial and bandwidth disagree".into()));
    }
    Ok(ValueObjective::new(trial, rule, bandwidth).evaluate(b.matrix()).0)
}

/// Kernel ridge dose rule on `Bᵀx`, clipped to the dose range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRidgeRule {
    basis: OrthonormalBasis,
    function: RidgeFunction,
    dose_range: (f64, f64),
}

impl KernelRidgeRule {
    pub fn new(basis: OrthonormalBasis, function: RidgeFunction, dose_range: (f64, f64)) -> Result<Self> {
        function.validate()?;
        if function.dim() != basis.d() {
            return Err(Error::DimensionMismatch("ridge function and basis dimensions".into()));
        }
        if !(dose_range.0 <= dose_range.1) {
            return Err(invalid("bad dose range"));
        }
        Ok(Self {
            basis,
            function,
            dose_range,
        })
    }

    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    pub fn function(&self) -> &RidgeFunction {
        &self.function
    }

    /// Unclipped rule value at reduced covariates.
    pub fn evaluate_reduced(&self, z: &[f64]) -> f64 {
        self.function.eval(z)
    }
}

impl DoseRule for KernelRidgeRule {
    fn recommend(&self, x: &[f64]) -> f64 {
        let v = self.function.eval(&self.basis.project_row(x));
        v.clamp(self.dose_range.0, self.dose_range.1)
    }

    fn covariate_dim(&self) -> usize {
        self.basis.p()
    }

    fn dose_range(&self) -> (f64, f64) {
        self.dose_range
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectOptions {
    pub optimizer: OptimizerOptions,
    /// Dose grid size; `⌈√n⌉` when unset.
    pub grid_size: Option<usize>,
    /// Ridge penalties searched by GCV; [`default_lambda_grid`] when unset.
    pub lambda_grid: Option<Vec<f64>>,
    pub bandwidth: BandwidthRule,
    pub seed: u64,
    /// Start from this basis instead of `optimizer.restarts` random ones.
    pub initial: Option<OrthonormalBasis>,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions {
                sense: Sense::Maximize,
                ..OptimizerOptions::default()
            },
            grid_size: None,
            lambda_grid: None,
            bandwidth: BandwidthRule::Silverman,
            seed: 0,
            initial: None,
        }
    }
}

/// One rule step: targets, GCV penalty and ridge fit at `b`.
#[derive(Debug, Clone)]
pub struct RuleStage {
    pub bandwidth: Bandwidth,
    pub targets: Vec<f64>,
    pub function: RidgeFunction,
    pub target_fallbacks: usize,
}

pub fn rule_stage(trial: &DoseTrial, b: &OrthonormalBasis, grid: &DoseGrid, opts: &DirectOptions) -> Result<RuleStage> {
    let z = b.project(trial.covariates());
    let bandwidth = reduced_dose_bandwidth(&z, trial.doses(), b.d(), opts.bandwidth)?;
    let (targets, target_fallbacks) = pseudo_dose_targets_counted(trial, b.matrix(), grid, &bandwidth)?;
    let rbf_scale = median_heuristic(&z);
    let lambdas = opts
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(trial.n()));
    let lambda = gcv_select_lambda(&z, &targets, &lambdas, rbf_scale)?;
    let function = fit_kernel_ridge_floored(&z, &targets, lambda, rbf_scale)?;
    Ok(RuleStage {
        bandwidth,
        targets,
        function,
        target_fallbacks,
    })
}

#[derive(Debug, Clone)]
pub struct DirectFit {
    pub basis: OrthonormalBasis,
    pub rule: KernelRidgeRule,
    pub report: FitReport,
    /// Empirical value of the final rule at the final basis.
    pub value: f64,
    pub bandwidth: Bandwidth,
}

pub fn fit_direct(trial: &DoseTrial, d: usize, opts: &DirectOptions) -> Result<DirectFit> {
    let p = trial.p();
    if d < 1 || d >= p {
        return Err(invalid(format!("need 1 <= d < p, got d={d}, p={p}")));
    }
    if trial.n() < 10 {
        return Err(invalid(format!("direct learning needs n >= 10, got {}", trial.n())));
    }
    let optimizer = OptimizerOptions {
        sense: Sense::Maximize,
        ..opts.optimizer
    };
    optimizer.validate()?;
    let grid = dose_grid(trial, opts.grid_size)?;
    let starts = match &opts.initial {
        Some(b) if b.p() == p && b.d() == d => vec![b.clone()],
        Some(_) => return Err(Error::DimensionMismatch("initial basis shape".into())),
        None => random_starts(p, d, optimizer.restarts, opts.seed)?,
    };
    let runs: Vec<Result<DirectFit>> = starts
        .par_iter()
        .enumerate()
        .map(|(r, s)| fit_direct_from(trial, s, &grid, opts, &optimizer, r))
        .collect();
    select_best(runs, Sense::Maximize, |f| f.value)
}

fn fit_direct_from(
    trial: &DoseTrial,
    start: &OrthonormalBasis,
    grid: &DoseGrid,
    opts: &DirectOptions,
    optimizer: &OptimizerOptions,
    restart_index: usize,
) -> Result<DirectFit> {
    let mut report = FitReport {
        objective_trace: Vec::new(),
        gradient_norms: Vec::new(),
        step_sizes: Vec::new(),
        iterations: 0,
        restart_index,
        termination: Termination::MaxIters,
        denominator_fallbacks: 0,
        sense: Sense::Maximize,
        segment_starts: Vec::new(),
    };
    let mut b = start.clone();
    for _ in 0..optimizer.max_iters {
        let stage = rule_stage(trial, &b, grid, opts)?;
        let f = &stage.function;
        let objective = ValueObjective::new(trial, |z: &[f64]| f.eval(z), &stage.bandwidth);
        let value = objective.value(b.matrix());
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective("empirical value".into()));
        }
        report.segment_starts.push(report.objective_trace.len());
        report.objective_trace.push(value);
        let g = numeric_gradient(&objective, b.matrix(), optimizer.grad_step)?;
        let q = skew_update_matrix(&g, b.matrix(), Sense::Maximize);
        let gnorm = q.norm();
        report.gradient_norms.push(gnorm);
        if gnorm <= optimizer.epsilon {
            report.termination = Termination::GradientTol;
            break;
        }
        match line_search(&objective, &b, value, &q, optimizer)? {
            LineSearchOutcome::Accepted { tau, basis, value } => {
                b = basis;
                report.objective_trace.push(value);
                report.step_sizes.push(tau);
                report.iterations += 1;
            }
            LineSearchOutcome::NoImprovingStep => {
                report.termination = Termination::NoImprovingStep;
                break;
            }
        }
    }
    let stage = rule_stage(trial, &b, grid, opts)?;
    let f = stage.function;
    let objective = ValueObjective::new(trial, |z: &[f64]| f.eval(z), &stage.bandwidth);
    let (value, fallbacks) = objective.evaluate(b.matrix());
    report.denominator_fallbacks = fallbacks + stage.target_fallbacks;
    let rule = KernelRidgeRule::new(b.clone(), f, trial.dose_range())?;
    Ok(DirectFit {
        basis: b,
        rule,
        report,
        value,
        bandwidth: stage.bandwidth,
    })
}
