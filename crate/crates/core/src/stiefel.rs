//! First-order optimization over the Stiefel manifold `{B ∈ R^{p×d} : BᵀB = I}`.
//!
//! Each iteration forms a central-difference Euclidean gradient `G`, the skew
//! matrix `Q = GBᵀ - BGᵀ`, and moves along the Cayley curve
//!
//! ```text
//! Y(τ) = (I + τ/2 Q)⁻¹ (I - τ/2 Q) B
//! ```
//!
//! which stays on the manifold for every `τ`. Along that curve the directional
//! derivative of the (minimization-sense) objective at `τ = 0` is `-½‖Q‖²_F`,
//! which is what the Armijo test compares against.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Feasibility tolerance `‖BᵀB - I‖_∞` accepted at construction.
pub const FEASIBILITY_TOL: f64 = 1e-10;
/// Drift above this after a Cayley step triggers a Newton-Schulz correction.
const REORTHO_TRIGGER: f64 = 1e-13;
/// Below this step size the curvature condition is not evaluated.
const CURVATURE_MIN_TAU: f64 = 1e-6;
const MAX_EXPANSIONS: usize = 12;

/// A `p × d` matrix with orthonormal columns, `1 ≤ d < p`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    entries: DMatrix<f64>,
}

impl OrthonormalBasis {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (p, d) = entries.shape();
        if d < 1 || d >= p {
            return Err(invalid(format!("basis must satisfy 1 <= d < p, got {p}x{d}")));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("basis has non-finite entries".into()));
        }
        let drift = orthonormality_error(&entries);
        if drift > FEASIBILITY_TOL {
            return Err(Error::InvalidData(format!(
                "basis is not orthonormal: max|BᵀB - I| = {drift:e}"
            )));
        }
        Ok(Self { entries })
    }

    /// Orthonormal factor of an arbitrary full-rank `p × d` matrix.
    pub fn orthonormalize(m: &DMatrix<f64>) -> Result<Self> {
        let (p, d) = m.shape();
        if d < 1 || d >= p {
            return Err(invalid(format!("basis must satisfy 1 <= d < p, got {p}x{d}")));
        }
        let qr = m.clone().qr();
        let r = qr.r();
        let scale = m.norm().max(f64::MIN_POSITIVE);
        if (0..d).any(|k| r[(k, k)].abs() <= 1e-12 * scale) {
            return Err(Error::RankDeficient("columns are linearly dependent".into()));
        }
        Self::new(qr.q())
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    /// `X B` for an `n × p` covariate matrix.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(x.nrows(), self.d(), &project_rows(x, &self.entries))
    }

    /// `Bᵀ x` for one covariate vector.
    pub fn project_row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d())
            .map(|l| self.entries.column(l).iter().zip(x).map(|(b, x)| b * x).sum())
            .collect()
    }

    pub fn feasibility_error(&self) -> f64 {
        orthonormality_error(&self.entries)
    }
}

/// Row-major `X B`, each entry summed in the same order as
/// [`OrthonormalBasis::project_row`] so that fit-time and prediction-time
/// reductions agree bit for bit.
pub(crate) fn project_rows(x: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = (x.nrows(), b.ncols());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for l in 0..d {
            out.push(b.column(l).iter().enumerate().map(|(k, b)| b * x[(i, k)]).sum());
        }
    }
    out
}

impl Serialize for OrthonormalBasis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr::from(&self.entries).serialize(s)
    }
}

impl<'de> Deserialize<'de> for OrthonormalBasis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = MatrixRepr::deserialize(d)?.into_matrix().map_err(serde::de::Error::custom)?;
        OrthonormalBasis::new(m).map_err(serde::de::Error::custom)
    }
}

/// Row-major matrix encoding used in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRepr {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRepr {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl MatrixRepr {
    pub fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// `max |BᵀB - I|`.
pub fn orthonormality_error(b: &DMatrix<f64>) -> f64 {
    let gram = b.transpose() * b;
    let d = gram.nrows();
    (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Maximize,
    Minimize,
}

impl Sense {
    /// Multiplier turning the objective into one to be minimized.
    fn sign(self) -> f64 {
        match self {
            Sense::Maximize => -1.0,
            Sense::Minimize => 1.0,
        }
    }

    /// `a` is at least as good as `b`.
    pub fn at_least_as_good(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Maximize => a >= b,
            Sense::Minimize => a <= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    /// Central-difference step, scaled by `max(1, |B_kl|)`.
    pub grad_step: f64,
    /// Stop when `‖Q‖_F` falls to this value.
    pub epsilon: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub tau_init: f64,
    pub armijo_c1: f64,
    pub wolfe_c2: f64,
    pub max_backtracks: usize,
    pub sense: Sense,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            grad_step: 1e-4,
            epsilon: 1e-8,
            max_iters: 200,
            restarts: 5,
            tau_init: 0.1,
            armijo_c1: 1e-4,
            wolfe_c2: 0.9,
            max_backtracks: 30,
            sense: Sense::Maximize,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.armijo_c1 && self.armijo_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(invalid(format!(
                "need 0 < armijo_c1 < wolfe_c2 < 1, got {} and {}",
                self.armijo_c1, self.wolfe_c2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if !(self.grad_step > 0.0 && self.grad_step.is_finite()) {
            return Err(invalid("grad_step must be positive"));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(invalid("tau_init must be positive"));
        }
        if self.restarts == 0 {
            return Err(invalid("restarts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTol,
    MaxIters,
    NoImprovingStep,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradientTol => "gradient_tol",
            Termination::MaxIters => "max_iters",
            Termination::NoImprovingStep => "no_improving_step",
        })
    }
}

/// Optimization trajectory of one (the selected) start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective_trace: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub iterations: usize,
    pub restart_index: usize,
    pub termination: Termination,
    pub denominator_fallbacks: usize,
    pub sense: Sense,
    /// Trace indices at which the objective itself was redefined (the direct
    /// learner refits its dose rule between steps). Monotonicity is only
    /// meaningful within a segment.
    pub segment_starts: Vec<usize>,
}

impl FitReport {
    fn new(sense: Sense, restart_index: usize) -> Self {
        Self {
            objective_trace: Vec::new(),
            gradient_norms: Vec::new(),
            step_sizes: Vec::new(),
            iterations: 0,
            restart_index,
            termination: Termination::MaxIters,
            denominator_fallbacks: 0,
            sense,
            segment_starts: vec![0],
        }
    }

    pub fn final_value(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    /// Whether the trace never moves against the optimization sense inside a
    /// segment of fixed objective, allowing `tol` of round-off.
    pub fn is_monotone(&self, tol: f64) -> bool {
        let mut bounds = self.segment_starts.clone();
        bounds.push(self.objective_trace.len());
        bounds.windows(2).all(|w| {
            self.objective_trace[w[0]..w[1].max(w[0])].windows(2).all(|p| match self.sense {
                Sense::Maximize => p[1] >= p[0] - tol,
                Sense::Minimize => p[1] <= p[0] + tol,
            })
        })
    }
}

/// A pure function of a `p × d` matrix. Evaluated at infeasible points too
/// (finite-difference probes).
pub trait Objective: Sync {
    fn value(&self, b: &DMatrix<f64>) -> f64;

    /// Number of kernel denominators that fell back to the global mean at `b`.
    fn fallbacks(&self, _b: &DMatrix<f64>) -> usize {
        0
    }
}

impl<F> Objective for F
where
    F: Fn(&DMatrix<f64>) -> f64 + Sync,
{
    fn value(&self, b: &DMatrix<f64>) -> f64 {
        self(b)
    }
}

/// Seed of restart `r` derived from a base seed.
pub fn restart_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Orthonormal factor of a seeded Gaussian `p × d` matrix.
pub fn random_orthonormal(p: usize, d: usize, seed: u64) -> Result<OrthonormalBasis> {
    if d < 1 || d >= p {
        return Err(invalid(format!("random basis needs 1 <= d < p, got p={p}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(p, d, |_, _| StandardNormal.sample(&mut rng));
    OrthonormalBasis::orthonormalize(&g)
}

pub fn random_starts(p: usize, d: usize, restarts: usize, seed: u64) -> Result<Vec<OrthonormalBasis>> {
    (0..restarts).map(|r| random_orthonormal(p, d, restart_seed(seed, r))).collect()
}

/// Entrywise central differences of `objective` at the raw entries of `b`.
pub fn numeric_gradient<O: Objective + ?Sized>(objective: &O, b: &DMatrix<f64>, grad_step: f64) -> Result<DMatrix<f64>> {
    if !(grad_step > 0.0) {
        return Err(invalid("grad_step must be positive"));
    }
    let (p, d) = b.shape();
    let entries: Vec<Result<f64>> = (0..p * d)
        .into_par_iter()
        .map(|idx| {
            let (k, l) = (idx % p, idx / p);
            let s = grad_step * b[(k, l)].abs().max(1.0);
            let mut probe = b.clone();
            probe[(k, l)] = b[(k, l)] + s;
            let up = objective.value(&probe);
            probe[(k, l)] = b[(k, l)] - s;
            let down = objective.value(&probe);
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFiniteObjective(format!("probe ({k}, {l})")));
            }
            Ok((up - down) / (2.0 * s))
        })
        .collect();
    let values = entries.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(DMatrix::from_column_slice(p, d, &values))
}

/// `Q = GBᵀ - BGᵀ` with `G` negated when maximizing, exactly antisymmetric.
pub fn skew_update_matrix(g: &DMatrix<f64>, b: &DMatrix<f64>, sense: Sense) -> DMatrix<f64> {
    let g_eff = g * sense.sign();
    let m = &g_eff * b.transpose() - b * g_eff.transpose();
    let p = m.nrows();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            0.0
        } else if i < j {
            0.5 * (m[(i, j)] - m[(j, i)])
        } else {
            -0.5 * (m[(j, i)] - m[(i, j)])
        }
    })
}

/// `(I + τ/2 Q)⁻¹ (I - τ/2 Q) B`.
pub fn cayley_step(b: &OrthonormalBasis, q: &DMatrix<f64>, tau: f64) -> Result<OrthonormalBasis> {
    let p = b.p();
    if q.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("Q is {:?}, expected {p}x{p}", q.shape())));
    }
    if tau == 0.0 {
        return Ok(b.clone());
    }
    let half = 0.5 * tau;
    let eye = DMatrix::<f64>::identity(p, p);
    let lhs = &eye + q * half;
    let rhs = (&eye - q * half) * b.matrix();
    let mut next = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("Cayley system I + τ/2 Q".into()))?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("Cayley solve produced non-finite entries".into()));
    }
    if orthonormality_error(&next) > REORTHO_TRIGGER {
        // Newton-Schulz: B (3I - BᵀB) / 2
        let gram = next.transpose() * &next;
        let d = gram.nrows();
        next = &next * (DMatrix::<f64>::identity(d, d) * 3.0 - gram) * 0.5;
    }
    OrthonormalBasis::new(next)
}

/// Outcome of one line search.
#[derive(Debug, Clone)]
pub enum LineSearchOutcome {
    Accepted {
        tau: f64,
        basis: OrthonormalBasis,
        value: f64,
    },
    NoImprovingStep,
}

/// Backtracking Armijo search along the Cayley curve, with step doubling
/// while the (finite-differenced) Wolfe curvature condition still fails.
pub fn line_search<O: Objective + ?Sized>(
    objective: &O,
    b: &OrthonormalBasis,
    current: f64,
    q: &DMatrix<f64>,
    opts: &OptimizerOptions,
) -> Result<LineSearchOutcome> {
    let sign = opts.sense.sign();
    let phi0 = sign * current;
    let slope0 = -0.5 * q.norm_squared();
    if !(slope0 < 0.0) {
        return Ok(LineSearchOutcome::NoImprovingStep);
    }
    let eval = |tau: f64| -> Result<(OrthonormalBasis, f64)> {
        let y = cayley_step(b, q, tau)?;
        let v = objective.value(y.matrix());
        Ok((y, v))
    };
    let armijo = |phi: f64, tau: f64| phi.is_finite() && phi <= phi0 + opts.armijo_c1 * tau * slope0 && phi < phi0;

    let mut tau = opts.tau_init;
    let mut accepted = None;
    for attempt in 0..=opts.max_backtracks {
        let (y, v) = eval(tau)?;
        if armijo(sign * v, tau) {
            accepted = Some((tau, y, v, attempt));
            break;
        }
        tau *= 0.5;
    }
    let Some((mut tau, mut basis, mut value, attempt)) = accepted else {
        return Ok(LineSearchOutcome::NoImprovingStep);
    };

    if attempt == 0 {
        for _ in 0..MAX_EXPANSIONS {
            if tau < CURVATURE_MIN_TAU {
                break;
            }
            let delta = 1e-3 * tau;
            let (_, v_ahead) = eval(tau + delta)?;
            let slope = sign * (v_ahead - value) / delta;
            if !slope.is_finite() || slope >= opts.wolfe_c2 * slope0 {
                break;
            }
            let (y2, v2) = eval(2.0 * tau)?;
            if armijo(sign * v2, 2.0 * tau) && sign * v2 < sign * value {
                tau *= 2.0;
                basis = y2;
                value = v2;
            } else {
                break;
            }
        }
    }
    Ok(LineSearchOutcome::Accepted { tau, basis, value })
}

/// Runs the Cayley ascent/descent loop from one start.
pub fn optimize_from<O: Objective + ?Sized>(
    objective: &O,
    start: &OrthonormalBasis,
    opts: &OptimizerOptions,
    restart_index: usize,
) -> Result<(OrthonormalBasis, FitReport)> {
    opts.validate()?;
    let mut report = FitReport::new(opts.sense, restart_index);
    let mut b = start.clone();
    let mut value = objective.value(b.matrix());
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective("starting basis".into()));
    }
    report.objective_trace.push(value);
    for _ in 0..opts.max_iters {
        let g = numeric_gradient(objective, b.matrix(), opts.grad_step)?;
        let q = skew_update_matrix(&g, b.matrix(), opts.sense);
        let gnorm = q.norm();
        report.gradient_norms.push(gnorm);
        if gnorm <= opts.epsilon {
            report.termination = Termination::GradientTol;
            break;
        }
        match line_search(objective, &b, value, &q, opts)? {
            LineSearchOutcome::Accepted { tau, basis, value: v } => {
                b = basis;
                value = v;
                report.objective_trace.push(v);
                report.step_sizes.push(tau);
                report.iterations += 1;
            }
            LineSearchOutcome::NoImprovingStep => {
                report.termination = Termination::NoImprovingStep;
                break;
            }
        }
    }
    report.denominator_fallbacks = objective.fallbacks(b.matrix());
    Ok((b, report))
}

/// Optimizes from every start and keeps the best final value (ties go to the
/// lowest start index).
pub fn optimize_on_stiefel<O: Objective + ?Sized>(
    objective: &O,
    starts: &[OrthonormalBasis],
    opts: &OptimizerOptions,
) -> Result<(OrthonormalBasis, FitReport)> {
    if starts.is_empty() {
        return Err(invalid("at least one starting basis is required"));
    }
    let runs: Vec<Result<(OrthonormalBasis, FitReport)>> = starts
        .par_iter()
        .enumerate()
        .map(|(r, s)| optimize_from(objective, s, opts, r))
        .collect();
    select_best(runs, opts.sense, |(_, rep)| rep.final_value().unwrap_or(f64::NAN))
}

/// Picks the best successful run; the first error is returned if all failed.
pub(crate) fn select_best<T>(runs: Vec<Result<T>>, sense: Sense, value: impl Fn(&T) -> f64) -> Result<T> {
    let mut best: Option<(f64, T)> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(t) => {
                let v = value(&t);
                let better = match &best {
                    None => true,
                    Some((bv, _)) => v.is_finite() && (!bv.is_finite() || (!sense.at_least_as_good(*bv, v))),
                };
                if better {
                    best = Some((v, t));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some((_, t)), _) => Ok(t),
        (None, Some(e)) => Err(e),
        (None, None) => Err(invalid("no runs")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn rayleigh(m: DMatrix<f64>) -> impl Fn(&DMatrix<f64>) -> f64 + Sync {
        move |b: &DMatrix<f64>| (b.transpose() * &m * b).trace()
    }

    fn angle_to_axis(b: &OrthonormalBasis, axis: usize) -> f64 {
        b.matrix()[(axis, 0)].abs().min(1.0).acos()
    }

    #[test]
    fn random_orthonormal_is_feasible_and_deterministic() {
        let b = random_orthonormal(3, 1, 4).unwrap();
        assert!((b.matrix().norm() - 1.0).abs() < 1e-15);
        let b = random_orthonormal(10, 2, 4).unwrap();
        assert!(b.feasibility_error() <= 1e-12);
        assert_eq!(b, random_orthonormal(10, 2, 4).unwrap());
        assert_ne!(b, random_orthonormal(10, 2, 5).unwrap());
        assert!(random_orthonormal(3, 3, 0).is_err());
        assert!(random_orthonormal(3, 0, 0).is_err());
    }

    #[test]
    fn basis_constructor_rejects_infeasible() {
        assert!(OrthonormalBasis::new(col(&[1.0, 1.0])).is_err());
        assert!(OrthonormalBasis::new(DMatrix::identity(2, 2)).is_err());
        assert!(OrthonormalBasis::new(col(&[0.6, 0.8])).is_ok());
    }

    #[test]
    fn gradient_of_linear_map_is_exact() {
        let c = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, -1.5, 0.25]);
        let cc = c.clone();
        let obj = move |b: &DMatrix<f64>| (cc.transpose() * b).trace();
        let b = random_orthonormal(3, 2, 1).unwrap();
        let g = numeric_gradient(&obj, b.matrix(), 1e-4).unwrap();
        assert!((g - c).amax() < 1e-10);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let obj = |_: &DMatrix<f64>| 3.5;
        let b = random_orthonormal(4, 2, 1).unwrap();
        assert_eq!(numeric_gradient(&obj, b.matrix(), 1e-4).unwrap().amax(), 0.0);
    }

    #[test]
    fn gradient_of_frobenius_norm() {
        let obj = |b: &DMatrix<f64>| b.norm_squared();
        let b = random_orthonormal(5, 2, 9).unwrap();
        let g = numeric_gradient(&obj, b.matrix(), 1e-5).unwrap();
        assert!((g - b.matrix() * 2.0).amax() < 1e-6);
    }

    #[test]
    fn gradient_rejects_non_finite() {
        let obj = |b: &DMatrix<f64>| if b[(0, 0)] > 0.9 { f64::NAN } else { 0.0 };
        let b = OrthonormalBasis::new(col(&[0.9, 0.0, 0.43588989435406733])).unwrap();
        assert!(matches!(numeric_gradient(&obj, b.matrix(), 1e-4), Err(Error::NonFiniteObjective(_))));
    }

    #[test]
    fn skew_matrix_examples() {
        let b = col(&[1.0, 0.0]);
        let q = skew_update_matrix(&col(&[0.0, 1.0]), &b, Sense::Minimize);
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        // maximizing negates G first
        let q = skew_update_matrix(&col(&[0.0, -1.0]), &b, Sense::Maximize);
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let zero = skew_update_matrix(&DMatrix::zeros(2, 1), &b, Sense::Minimize);
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn cayley_examples() {
        let b = OrthonormalBasis::new(col(&[1.0, 0.0])).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let next = cayley_step(&b, &q, 2.0).unwrap();
        assert!((next.matrix() - col(&[0.0, -1.0])).amax() < 1e-15);
        assert_eq!(cayley_step(&b, &DMatrix::zeros(2, 2), 0.7).unwrap(), b);
        assert_eq!(cayley_step(&b, &q, 0.0).unwrap(), b);
    }

    #[test]
    fn line_search_improves_rayleigh() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let obj = rayleigh(m);
        let b = OrthonormalBasis::new(col(&[0.0, 1.0])).unwrap();
        // tilt slightly so the gradient has a tangential component
        let b = cayley_step(&b, &DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]), 0.01).unwrap();
        let v0 = obj(b.matrix());
        let opts = OptimizerOptions::default();
        let g = numeric_gradient(&obj, b.matrix(), 1e-4).unwrap();
        let q = skew_update_matrix(&g, b.matrix(), Sense::Maximize);
        match line_search(&obj, &b, v0, &q, &opts).unwrap() {
            LineSearchOutcome::Accepted { value, .. } => assert!(value > v0 && value > 1.0),
            LineSearchOutcome::NoImprovingStep => panic!("expected an improving step"),
        }
    }

    #[test]
    fn optimizer_finds_extreme_eigenvectors() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.0]));
        let obj = rayleigh(m);
        let starts = random_starts(3, 1, 3, 17).unwrap();
        let opts = OptimizerOptions::default();
        let (b, rep) = optimize_on_stiefel(&obj, &starts, &opts).unwrap();
        assert!(angle_to_axis(&b, 0) < 1e-3, "{:?}", b);
        assert!(rep.is_monotone(0.0));
        let opts = OptimizerOptions {
            sense: Sense::Minimize,
            ..opts
        };
        let (b, rep) = optimize_on_stiefel(&obj, &starts, &opts).unwrap();
        assert!(angle_to_axis(&b, 2) < 1e-3, "{:?}", b);
        assert!(rep.is_monotone(0.0));
    }

    #[test]
    fn constant_objective_stops_immediately() {
        let obj = |_: &DMatrix<f64>| 1.0;
        let starts = random_starts(5, 2, 2, 3).unwrap();
        let (_, rep) = optimize_on_stiefel(&obj, &starts, &OptimizerOptions::default()).unwrap();
        assert_eq!(rep.termination, Termination::GradientTol);
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.restart_index, 0);
    }

    #[test]
    fn options_validation() {
        let bad = OptimizerOptions {
            armijo_c1: 0.95,
            ..OptimizerOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerOptions {
            epsilon: 0.0,
            ..OptimizerOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_monotonicity_respects_segments() {
        let mut rep = FitReport::new(Sense::Maximize, 0);
        rep.objective_trace = vec![1.0, 2.0, 1.5, 1.7];
        assert!(!rep.is_monotone(0.0));
        rep.segment_starts = vec![0, 2];
        assert!(rep.is_monotone(0.0));
    }

    fn random_skew(p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: DMatrix<f64> = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
        &a - a.transpose()
    }

    proptest! {
        #[test]
        fn cayley_preserves_feasibility_and_inverts(p in 2usize..12, dsel in 0usize..3, seed in 0u64..1000, tau in 0.0f64..1.0) {
            let d = 1 + dsel % (p - 1).min(3);
            let b = random_orthonormal(p, d, seed).unwrap();
            let q = random_skew(p, seed + 1);
            prop_assert!((&q + q.transpose()).amax() == 0.0);
            let next = cayley_step(&b, &q, tau).unwrap();
            prop_assert!(next.feasibility_error() <= 1e-12);
            let back = cayley_step(&next, &q, -tau).unwrap();
            prop_assert!((back.matrix() - b.matrix()).amax() <= 1e-10);
        }

        #[test]
        fn skew_matrix_is_antisymmetric(p in 2usize..10, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: DMatrix<f64> = DMatrix::from_fn(p, 1, |_, _| StandardNormal.sample(&mut rng));
            let b = random_orthonormal(p, 1, seed + 7).unwrap();
            for sense in [Sense::Maximize, Sense::Minimize] {
                let q = skew_update_matrix(&g, b.matrix(), sense);
                prop_assert_eq!((&q + q.transpose()).amax(), 0.0);
            }
        }

        #[test]
        fn gradient_step_consistency(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: DMatrix<f64> = DMatrix::from_fn(4, 2, |_, _| StandardNormal.sample(&mut rng));
            let obj = move |b: &DMatrix<f64>| (c.transpose() * b).map(|v| v.sin()).sum() + b.norm_squared().powi(2);
            let b = random_orthonormal(4, 2, seed).unwrap();
            let g1 = numeric_gradient(&obj, b.matrix(), 1e-4).unwrap();
            let g2 = numeric_gradient(&obj, b.matrix(), 1e-5).unwrap();
            for (a, b) in g1.iter().zip(g2.iter()) {
                prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }
}
