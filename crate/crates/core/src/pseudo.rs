//! Pseudo-direct learning: estimate the basis by minimizing the kernel
//! least-squares criterion
//!
//! ```text
//! ψ(B) = n⁻¹ Σ_i {R_i - M̂(Bᵀx_i, A_i)}²,
//! ```
//!
//! with `M̂` the Nadaraya-Watson regression of `R` on `(BᵀX, A)`, then fit a
//! dose rule on the reduced covariates. The second stage here is the grid
//! argmax of the same kernel reward surface ([`GridKernelRule`]).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DoseTrial;
use crate::direct::{dose_grid, DoseGrid};
use crate::error::{invalid, Error, Result};
use crate::kernel::{default_floor, global_mean, reduced_dose_bandwidth, Bandwidth, BandwidthRule, WeightedMean};
use crate::rule::DoseRule;
use crate::stiefel::{
    optimize_from, project_rows, random_starts, select_best, FitReport, Objective, OptimizerOptions,
    OrthonormalBasis, Sense,
};
use crate::surface::RewardSurface;

/// ψ as a function of the basis, with the bandwidth held fixed.
pub struct PsiObjective<'a> {
    x: &'a DMatrix<f64>,
    rewards: &'a [f64],
    /// `n × n` dose factors `exp(-½((A_i - A_j)/h_a)²)`, row-major.
    dose_kernel: Vec<f64>,
    inv_h: Vec<f64>,
    normalizer: f64,
    floor: f64,
    fallback_mean: f64,
    loo: bool,
}

impl<'a> PsiObjective<'a> {
    pub fn new(trial: &'a DoseTrial, bandwidth: &Bandwidth, loo: bool) -> Result<Self> {
        Self::from_parts(trial.covariates(), trial.doses(), trial.rewards(), bandwidth, loo)
    }

    /// Same as [`PsiObjective::new`] on raw arrays; allows `n = 1`.
    pub fn from_parts(
        x: &'a DMatrix<f64>,
        doses: &[f64],
        rewards: &'a [f64],
        bandwidth: &Bandwidth,
        loo: bool,
    ) -> Result<Self> {
        let n = rewards.len();
        if n == 0 || x.nrows() != n || doses.len() != n {
            return Err(Error::DimensionMismatch("covariates, doses and rewards differ in length".into()));
        }
        if loo && n < 2 {
            return Err(invalid("leave-one-out ψ needs n >= 2"));
        }
        let inv_h: Vec<f64> = bandwidth.per_coord().iter().map(|h| 1.0 / h).collect();
        let inv_ha = *inv_h.last().expect("bandwidth is non-empty");
        let mut dose_kernel = vec![1.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let t = (doses[i] - doses[j]) * inv_ha;
                let v = (-0.5 * t * t).exp();
                dose_kernel[i * n + j] = v;
                dose_kernel[j * n + i] = v;
            }
        }
        Ok(Self {
            x,
            rewards,
            dose_kernel,
            inv_h,
            normalizer: bandwidth.normalizer(),
            floor: default_floor(n),
            fallback_mean: global_mean(rewards),
            loo,
        })
    }

    /// Number of reduced coordinates the bandwidth was built for.
    pub fn reduced_dim(&self) -> usize {
        self.inv_h.len() - 1
    }

    /// `(ψ(B), number of fallback denominators)`.
    pub fn evaluate(&self, b: &DMatrix<f64>) -> (f64, usize) {
        let n = self.rewards.len();
        let d = b.ncols();
        debug_assert_eq!(d, self.reduced_dim());
        let z = project_rows(self.x, b);
        let c = self.rewards[0];
        let (mut num, mut den) = if self.loo {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (self.rewards.iter().map(|r| r - c).collect(), vec![1.0; n])
        };
        for i in 0..n {
            let zi = &z[i * d..(i + 1) * d];
            let ri = self.rewards[i] - c;
            for j in (i + 1)..n {
                let zj = &z[j * d..(j + 1) * d];
                let mut s = 0.0;
                for l in 0..d {
                    let t = (zi[l] - zj[l]) * self.inv_h[l];
                    s += t * t;
                }
                let w = (-0.5 * s).exp() * self.dose_kernel[i * n + j];
                num[i] += w * (self.rewards[j] - c);
                den[i] += w;
                num[j] += w * ri;
                den[j] += w;
            }
        }
        let mut total = 0.0;
        let mut fallbacks = 0;
        for i in 0..n {
            let est = WeightedMean::from_sums(c, self.fallback_mean, num[i], den[i]).finish(self.normalizer, self.floor);
            fallbacks += est.fallback as usize;
            let r = self.rewards[i] - est.value;
            total += r * r;
        }
        (total / n as f64, fallbacks)
    }
}

impl Objective for PsiObjective<'_> {
    fn value(&self, b: &DMatrix<f64>) -> f64 {
        self.evaluate(b).0
    }

    fn fallbacks(&self, b: &DMatrix<f64>) -> usize {
        self.evaluate(b).1
    }
}

/// ψ at one basis with a given `(d+1)`-coordinate bandwidth.
pub fn psi_objective(trial: &DoseTrial, b: &OrthonormalBasis, bandwidth: &Bandwidth, loo: bool) -> Result<f64> {
    if b.p() != trial.p() || bandwidth.dim() != b.d() + 1 {
        return Err(Error::DimensionMismatch("basis, trial and bandwidth disagree".into()));
    }
    Ok(PsiObjective::new(trial, bandwidth, loo)?.evaluate(b.matrix()).0)
}

/// Rule-of-thumb bandwidth on `(BᵀX, A)` at basis `b`.
pub fn basis_bandwidth(trial: &DoseTrial, b: &OrthonormalBasis, rule: BandwidthRule) -> Result<Bandwidth> {
    reduced_dose_bandwidth(&b.project(trial.covariates()), trial.doses(), b.d(), rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOptions {
    pub optimizer: OptimizerOptions,
    pub bandwidth: BandwidthRule,
    /// Exclude each point's own term from `M̂` in ψ.
    pub loo: bool,
    /// Grid size of the second-stage rule; `⌈√n⌉` when unset.
    pub grid_size: Option<usize>,
    pub seed: u64,
    pub initial: Option<OrthonormalBasis>,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions {
                sense: Sense::Minimize,
                ..OptimizerOptions::default()
            },
            bandwidth: BandwidthRule::Silverman,
            loo: false,
            grid_size: None,
            seed: 0,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoFit {
    pub basis: OrthonormalBasis,
    pub rule: GridKernelRule,
    pub report: FitReport,
    /// Final ψ under the bandwidth frozen for the selected start.
    pub psi: f64,
    /// That frozen bandwidth.
    pub bandwidth: Bandwidth,
}

/// Minimizes ψ from each start (bandwidth frozen at the start), keeps the
/// smallest final ψ and builds the second-stage rule at the winner.
pub fn fit_pseudo_direct(trial: &DoseTrial, d: usize, opts: &PseudoOptions) -> Result<PseudoFit> {
    let p = trial.p();
    if d < 1 || d >= p {
        return Err(invalid(format!("need 1 <= d < p, got d={d}, p={p}")));
    }
    if trial.n() < 10 {
        return Err(invalid(format!("pseudo-direct learning needs n >= 10, got {}", trial.n())));
    }
    let optimizer = OptimizerOptions {
        sense: Sense::Minimize,
        ..opts.optimizer
    };
    optimizer.validate()?;
    let grid = dose_grid(trial, opts.grid_size)?;
    let starts = match &opts.initial {
        Some(b) if b.p() == p && b.d() == d => vec![b.clone()],
        Some(_) => return Err(Error::DimensionMismatch("initial basis shape".into())),
        None => random_starts(p, d, optimizer.restarts, opts.seed)?,
    };
    let runs: Vec<Result<(OrthonormalBasis, FitReport, Bandwidth)>> = starts
        .par_iter()
        .enumerate()
        .map(|(r, start)| {
            let bandwidth = basis_bandwidth(trial, start, opts.bandwidth)?;
            let objective = PsiObjective::new(trial, &bandwidth, opts.loo)?;
            let (b, report) = optimize_from(&objective, start, &optimizer, r)?;
            Ok((b, report, bandwidth))
        })
        .collect();
    let (basis, report, bandwidth) = select_best(runs, Sense::Minimize, |(_, rep, _)| {
        rep.final_value().unwrap_or(f64::NAN)
    })?;
    let psi = report.final_value().unwrap_or(f64::NAN);
    let rule_bw = basis_bandwidth(trial, &basis, opts.bandwidth)?;
    let rule = GridKernelRule::new(trial, Some(basis.clone()), grid, rule_bw)?;
    Ok(PseudoFit {
        basis,
        rule,
        report,
        psi,
        bandwidth,
    })
}

/// Second-stage rule at an estimated basis, bandwidth supplied.
pub fn second_stage_rule(trial: &DoseTrial, b_hat: &OrthonormalBasis, grid: &DoseGrid, bandwidth: &Bandwidth) -> Result<GridKernelRule> {
    GridKernelRule::new(trial, Some(b_hat.clone()), grid.clone(), bandwidth.clone())
}

/// The grid-kernel rule on all raw covariates (no reduction), with the
/// rule-of-thumb bandwidth for `p` dimensions.
pub fn no_reduction_rule(trial: &DoseTrial, grid_size: Option<usize>, rule: BandwidthRule) -> Result<GridKernelRule> {
    let grid = dose_grid(trial, grid_size)?;
    let bandwidth = reduced_dose_bandwidth(trial.covariates(), trial.doses(), trial.p(), rule)?;
    GridKernelRule::new(trial, None, grid, bandwidth)
}

/// Recommends the grid dose maximizing the kernel reward estimate at the
/// (projected) covariates; ties go to the smallest dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridKernelRule {
    /// `None` means the identity: the rule works on raw covariates.
    projection: Option<OrthonormalBasis>,
    p: usize,
    /// Row-major `n × k` training anchors.
    anchors: Vec<f64>,
    doses: Vec<f64>,
    rewards: Vec<f64>,
    grid: DoseGrid,
    bandwidth: Bandwidth,
    dose_range: (f64, f64),
}

impl GridKernelRule {
    pub fn new(trial: &DoseTrial, projection: Option<OrthonormalBasis>, grid: DoseGrid, bandwidth: Bandwidth) -> Result<Self> {
        let p = trial.p();
        let anchors = match &projection {
            Some(b) if b.p() != p => return Err(Error::DimensionMismatch("projection and trial covariates".into())),
            Some(b) => project_rows(trial.covariates(), b.matrix()),
            None => crate::direct::row_major(trial.covariates()),
        };
        let rule = Self {
            projection,
            p,
            anchors,
            doses: trial.doses().to_vec(),
            rewards: trial.rewards().to_vec(),
            grid,
            bandwidth,
            dose_range: trial.dose_range(),
        };
        rule.validate()?;
        Ok(rule)
    }

    /// Checks internal consistency (used after deserialization too).
    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        let k = self.reduced_dim();
        if n == 0 || self.doses.len() != n || self.anchors.len() != n * k {
            return Err(Error::DimensionMismatch("rule training arrays disagree".into()));
        }
        if self.bandwidth.dim() != k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "rule bandwidth has {} coordinates, expected {}",
                self.bandwidth.dim(),
                k + 1
            )));
        }
        if self.grid.len() < 2 {
            return Err(invalid("rule grid needs at least 2 points"));
        }
        if !(self.dose_range.0 <= self.dose_range.1) {
            return Err(invalid("bad dose range"));
        }
        Ok(())
    }

    pub fn projection(&self) -> Option<&OrthonormalBasis> {
        self.projection.as_ref()
    }

    pub fn reduced_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.p, |b| b.d())
    }

    pub fn grid(&self) -> &DoseGrid {
        &self.grid
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    fn surface(&self) -> RewardSurface<'_> {
        RewardSurface::new(
            &self.anchors,
            self.reduced_dim(),
            &self.doses,
            &self.rewards,
            &self.bandwidth,
            self.grid.points(),
            default_floor(self.rewards.len()),
        )
    }

    fn reduce(&self, x: &[f64]) -> Vec<f64> {
        match &self.projection {
            Some(b) => b.project_row(x),
            None => x.to_vec(),
        }
    }
}

impl DoseRule for GridKernelRule {
    fn recommend(&self, x: &[f64]) -> f64 {
        self.surface().argmax(&self.reduce(x)).0
    }

    fn covariate_dim(&self) -> usize {
        self.p
    }

    fn dose_range(&self) -> (f64, f64) {
        self.dose_range
    }

    fn recommend_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let surface = self.surface();
        (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                surface.argmax(&self.reduce(&row)).0
            })
            .collect()
    }
}

/// Holdout ψ of a fitted basis: NW regression from the training points,
/// evaluated at held-out `(Bᵀx, a)`.
pub fn holdout_psi(train: &DoseTrial, test: &DoseTrial, b: &OrthonormalBasis, bandwidth: &Bandwidth) -> Result<f64> {
    if train.p() != test.p() || b.p() != train.p() || bandwidth.dim() != b.d() + 1 {
        return Err(Error::DimensionMismatch("holdout inputs disagree".into()));
    }
    let d = b.d();
    let mut anchors = b.project(train.covariates()).resize_horizontally(d + 1, 0.0);
    anchors.set_column(d, &nalgebra::DVector::from_column_slice(train.doses()));
    let zt = b.project(test.covariates());
    let floor = default_floor(train.n());
    let mut total = 0.0;
    for j in 0..test.n() {
        let mut q: Vec<f64> = zt.row(j).iter().copied().collect();
        q.push(test.doses()[j]);
        let m = crate::kernel::nw_conditional_mean(&anchors, train.rewards(), &q, bandwidth, floor, None)?;
        total += (test.rewards()[j] - m).powi(2);
    }
    Ok(total / test.n() as f64)
}

/// Fits each `d ∈ 1..=d_max` on the first `n - holdout` rows and reports the
/// holdout ψ of each fit on the remaining rows.
pub fn dimension_sweep(trial: &DoseTrial, d_max: usize, holdout: usize, opts: &PseudoOptions) -> Result<Vec<(usize, f64)>> {
    let n = trial.n();
    if holdout == 0 || holdout + 10 > n {
        return Err(invalid(format!("holdout of {holdout} leaves too few training rows out of {n}")));
    }
    if d_max < 1 || d_max >= trial.p() {
        return Err(invalid(format!("need 1 <= d_max < p, got {d_max}")));
    }
    let split = |rows: std::ops::Range<usize>| -> Result<DoseTrial> {
        let idx: Vec<usize> = rows.collect();
        let x = trial.covariates().select_rows(idx.iter());
        let a = idx.iter().map(|&i| trial.doses()[i]).collect();
        let r = idx.iter().map(|&i| trial.rewards()[i]).collect();
        let prop = trial.propensity().map(|p| idx.iter().map(|&i| p[i]).collect());
        let (lo, hi) = trial.dose_range();
        DoseTrial::with_range(x, a, r, prop, lo, hi)
    };
    let train = split(0..n - holdout)?;
    let test = split(n - holdout..n)?;
    (1..=d_max)
        .map(|d| {
            let fit = fit_pseudo_direct(&train, d, opts)?;
            Ok((d, holdout_psi(&train, &test, &fit.basis, &fit.bandwidth)?))
        })
        .collect()
}
