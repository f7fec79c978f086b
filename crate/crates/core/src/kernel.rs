//! Gaussian kernels, the rule-of-thumb bandwidth and the Nadaraya-Watson
//! conditional-mean estimator.
//!
//! Every kernel here is a product of one-dimensional Gaussians. A bandwidth is
//! stored per coordinate (`h · σ̂_k`), so a product kernel evaluates as
//! `(2π)^{-m/2} ∏ h_k⁻¹ · exp(-½ Σ (u_k / h_k)²)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Relative floor for Nadaraya-Watson denominators, multiplied by the number
/// of anchors.
pub const DENOMINATOR_FLOOR_PER_POINT: f64 = 1e-12;

pub fn default_floor(n: usize) -> f64 {
    DENOMINATOR_FLOOR_PER_POINT * n as f64
}

/// `φ(u/h)/h` with `φ` the standard normal density.
pub fn gaussian_kernel(u: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("bandwidth must be positive, got {h}")));
    }
    let t = u / h;
    Ok(INV_SQRT_2PI * (-0.5 * t * t).exp() / h)
}

/// Product of [`gaussian_kernel`] over the coordinates of `u`, all sharing `h`.
pub fn product_kernel(u: &[f64], h: f64) -> Result<f64> {
    if u.is_empty() {
        return Err(invalid("product kernel of an empty vector"));
    }
    Bandwidth::isotropic(u.len(), h)?.kernel(u)
}

/// `{4/(d+2)}^{1/(d+4)} n^{-1/(d+4)} σ`.
pub fn silverman_bandwidth(d: usize, n: usize, sigma: f64) -> Result<f64> {
    if d < 1 || n < 2 || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!(
            "silverman bandwidth needs d >= 1, n >= 2, sigma > 0 (got d={d}, n={n}, sigma={sigma})"
        )));
    }
    let d = d as f64;
    let expo = 1.0 / (d + 4.0);
    Ok((4.0 / (d + 2.0)).powf(expo) * (n as f64).powf(-expo) * sigma)
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_sd(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum BandwidthRule {
    #[default]
    Silverman,
    /// Scalar bandwidth applied to standardized coordinates.
    Fixed(f64),
}

/// Scalar bandwidth rule plus the per-coordinate scales `σ̂_k` it is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSpec {
    pub rule: BandwidthRule,
    pub per_dimension_scale: Vec<f64>,
}

impl BandwidthSpec {
    pub fn new(rule: BandwidthRule, per_dimension_scale: Vec<f64>) -> Result<Self> {
        if per_dimension_scale.is_empty() {
            return Err(invalid("bandwidth needs at least one coordinate scale"));
        }
        if let Some(s) = per_dimension_scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("coordinate scale must be positive, got {s}")));
        }
        if let BandwidthRule::Fixed(h) = rule {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid(format!("fixed bandwidth must be positive, got {h}")));
            }
        }
        Ok(Self {
            rule,
            per_dimension_scale,
        })
    }

    /// Per-coordinate bandwidths; `dim` is the dimension fed to the rule of thumb.
    pub fn resolve(&self, dim: usize, n: usize) -> Result<Bandwidth> {
        let per_coord = match self.rule {
            BandwidthRule::Silverman => self
                .per_dimension_scale
                .iter()
                .map(|&s| silverman_bandwidth(dim, n, s))
                .collect::<Result<Vec<_>>>()?,
            BandwidthRule::Fixed(h) => self.per_dimension_scale.iter().map(|s| h * s).collect(),
        };
        Bandwidth::new(per_coord)
    }
}

/// Per-coordinate Gaussian bandwidths of a product kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    per_coord: Vec<f64>,
}

impl Bandwidth {
    pub fn new(per_coord: Vec<f64>) -> Result<Self> {
        if per_coord.is_empty() {
            return Err(invalid("bandwidth must have at least one coordinate"));
        }
        if let Some(h) = per_coord.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(invalid(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self { per_coord })
    }

    pub fn isotropic(m: usize, h: f64) -> Result<Self> {
        Self::new(vec![h; m])
    }

    pub fn dim(&self) -> usize {
        self.per_coord.len()
    }

    pub fn per_coord(&self) -> &[f64] {
        &self.per_coord
    }

    /// `(2π)^{-m/2} / ∏ h_k`, the factor in front of the exponential.
    pub fn normalizer(&self) -> f64 {
        self.per_coord.iter().fold(1.0, |acc, h| acc * INV_SQRT_2PI / h)
    }

    /// `Σ (u_k / h_k)²`.
    #[inline]
    pub fn scaled_sq_norm(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.per_coord).map(|(u, h)| (u / h) * (u / h)).sum()
    }

    pub fn kernel(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel argument has {} coordinates, bandwidth {}",
                u.len(),
                self.dim()
            )));
        }
        Ok(self.normalizer() * (-0.5 * self.scaled_sq_norm(u)).exp())
    }
}

/// Rule-of-thumb bandwidth for the stacked `(z, a)` kernel of reduced
/// covariates and dose.
///
/// The reduced coordinates share one pooled scale `sqrt(mean_k var(z_k))`,
/// which keeps the kernel isotropic in `z` so that rotating the basis leaves
/// every kernel sum unchanged. `structural_dim` is the `d` of the rule.
pub fn reduced_dose_bandwidth(
    z: &DMatrix<f64>,
    doses: &[f64],
    structural_dim: usize,
    rule: BandwidthRule,
) -> Result<Bandwidth> {
    let n = z.nrows();
    let d = z.ncols();
    if d == 0 || n < 2 || doses.len() != n {
        return Err(invalid("reduced bandwidth needs n >= 2 rows and matching doses"));
    }
    let pooled_var = (0..d)
        .map(|k| sample_sd(z.column(k).iter().copied()).powi(2))
        .sum::<f64>()
        / d as f64;
    let sd_z = pooled_var.sqrt();
    let sd_a = sample_sd(doses.iter().copied());
    if !(sd_z > 0.0) || !(sd_a > 0.0) {
        return Err(Error::InvalidData(
            "reduced covariates or doses have zero spread; bandwidth undefined".into(),
        ));
    }
    let mut scales = vec![sd_z; d];
    scales.push(sd_a);
    BandwidthSpec::new(rule, scales)?.resolve(structural_dim, n)
}

/// Value and fallback flag of one Nadaraya-Watson evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NwEstimate {
    pub value: f64,
    /// The kernel denominator fell below the floor and the global response
    /// mean was returned instead.
    pub fallback: bool,
}

/// `Σ R_i K_h(q - x_i) / Σ K_h(q - x_i)` over anchor rows of `anchors`.
pub fn nw_conditional_mean(
    anchors: &DMatrix<f64>,
    responses: &[f64],
    query: &[f64],
    bandwidth: &Bandwidth,
    floor: f64,
    exclude: Option<usize>,
) -> Result<f64> {
    nw_estimate(anchors, responses, query, bandwidth, floor, exclude).map(|e| e.value)
}

pub fn nw_estimate(
    anchors: &DMatrix<f64>,
    responses: &[f64],
    query: &[f64],
    bandwidth: &Bandwidth,
    floor: f64,
    exclude: Option<usize>,
) -> Result<NwEstimate> {
    let (n, m) = anchors.shape();
    if n == 0 || responses.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} anchors for {} responses",
            responses.len()
        )));
    }
    if query.len() != m || bandwidth.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "query has {} coordinates, anchors {m}, bandwidth {}",
            query.len(),
            bandwidth.dim()
        )));
    }
    if let Some(e) = exclude {
        if n < 2 || e >= n {
            return Err(invalid("exclusion leaves no anchors"));
        }
    }
    let mut acc = WeightedMean::new(responses);
    let mut u = vec![0.0; m];
    for i in 0..n {
        if Some(i) == exclude {
            continue;
        }
        for k in 0..m {
            u[k] = query[k] - anchors[(i, k)];
        }
        acc.add((-0.5 * bandwidth.scaled_sq_norm(&u)).exp(), responses[i]);
    }
    Ok(acc.finish(bandwidth.normalizer(), floor))
}

/// Accumulates a kernel-weighted mean of responses, centred on a reference
/// response so that identical responses reproduce exactly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WeightedMean {
    center: f64,
    fallback_mean: f64,
    num: f64,
    den: f64,
}

impl WeightedMean {
    pub(crate) fn new(responses: &[f64]) -> Self {
        Self::with_fallback(responses[0], global_mean(responses))
    }

    pub(crate) fn with_fallback(center: f64, fallback_mean: f64) -> Self {
        Self {
            center,
            fallback_mean,
            num: 0.0,
            den: 0.0,
        }
    }

    /// Accumulator from already-centred sums.
    pub(crate) fn from_sums(center: f64, fallback_mean: f64, num: f64, den: f64) -> Self {
        Self {
            center,
            fallback_mean,
            num,
            den,
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, weight: f64, response: f64) {
        self.num += weight * (response - self.center);
        self.den += weight;
    }

    /// `normalizer` converts the summed exponentials into kernel values for
    /// the floor comparison.
    #[inline]
    pub(crate) fn finish(self, normalizer: f64, floor: f64) -> NwEstimate {
        if !(self.den * normalizer >= floor) || self.den == 0.0 {
            NwEstimate {
                value: self.fallback_mean,
                fallback: true,
            }
        } else {
            NwEstimate {
                value: self.center + self.num / self.den,
                fallback: false,
            }
        }
    }
}

/// Mean that returns the common value exactly when all inputs are equal.
pub(crate) fn global_mean(values: &[f64]) -> f64 {
    let c = values[0];
    c + values.iter().map(|v| v - c).sum::<f64>() / values.len() as f64
}
