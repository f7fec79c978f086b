//! Observed dose trials and the five synthetic simulation settings.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Propensity stored for generated data: the uniform density on `[0, 2]`.
pub const SYNTHETIC_PROPENSITY: f64 = 0.5;
pub const SYNTHETIC_DOSE_RANGE: (f64, f64) = (0.0, 2.0);

/// `n` observations of covariates, assigned dose, reward and (optionally) the
/// density of the assigned dose given the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseTrial {
    covariates: DMatrix<f64>,
    doses: Vec<f64>,
    rewards: Vec<f64>,
    propensity: Option<Vec<f64>>,
    dose_min: f64,
    dose_max: f64,
    covariate_names: Vec<String>,
}

impl DoseTrial {
    /// Builds a trial whose dose range is the observed min/max.
    pub fn new(
        covariates: DMatrix<f64>,
        doses: Vec<f64>,
        rewards: Vec<f64>,
        propensity: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (lo, hi) = observed_range(&doses);
        Self::with_range(covariates, doses, rewards, propensity, lo, hi)
    }

    pub fn with_range(
        covariates: DMatrix<f64>,
        doses: Vec<f64>,
        rewards: Vec<f64>,
        propensity: Option<Vec<f64>>,
        dose_min: f64,
        dose_max: f64,
    ) -> Result<Self> {
        let names = (1..=covariates.ncols()).map(|k| format!("x{k}")).collect();
        let trial = Self {
            covariates,
            doses,
            rewards,
            propensity,
            dose_min,
            dose_max,
            covariate_names: names,
        };
        trial.validate()?;
        Ok(trial)
    }

    fn validate(&self) -> Result<()> {
        let n = self.covariates.nrows();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {n}")));
        }
        if self.covariates.ncols() < 1 {
            return Err(Error::InvalidData("need at least one covariate".into()));
        }
        if self.doses.len() != n || self.rewards.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} covariate rows but {} doses and {} rewards",
                self.doses.len(),
                self.rewards.len()
            )));
        }
        if self.covariate_names.len() != self.covariates.ncols() {
            return Err(Error::DimensionMismatch("covariate name count".into()));
        }
        if !(self.dose_min.is_finite() && self.dose_max.is_finite() && self.dose_min <= self.dose_max)
        {
            return Err(Error::InvalidData(format!(
                "bad dose range [{}, {}]",
                self.dose_min, self.dose_max
            )));
        }
        if let Some((i, _)) = self.covariates.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate at row {}, column {}",
                i % n,
                i / n
            )));
        }
        for (i, (&a, &r)) in self.doses.iter().zip(&self.rewards).enumerate() {
            if !a.is_finite() || !r.is_finite() {
                return Err(Error::InvalidData(format!("non-finite dose or reward at row {i}")));
            }
            if a < self.dose_min || a > self.dose_max {
                return Err(Error::InvalidData(format!(
                    "dose {a} at row {i} outside [{}, {}]",
                    self.dose_min, self.dose_max
                )));
            }
        }
        if let Some(prop) = &self.propensity {
            if prop.len() != n {
                return Err(Error::DimensionMismatch("propensity length".into()));
            }
            if let Some((i, v)) = prop.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::InvalidData(format!("propensity {v} at row {i} is not positive")));
            }
        }
        Ok(())
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} covariates",
                names.len(),
                self.p()
            )));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn propensity(&self) -> Option<&[f64]> {
        self.propensity.as_deref()
    }

    pub fn dose_range(&self) -> (f64, f64) {
        (self.dose_min, self.dose_max)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Covariate row `i` as an owned vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.covariates.row(i).iter().copied().collect()
    }

    /// Writes the trial as CSV: covariates, `a`, `r`, then `prop` when present.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.covariate_names.clone();
        header.push("a".into());
        header.push("r".into());
        if self.propensity.is_some() {
            header.push("prop".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.covariates.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.doses[i]));
            rec.push(format!("{:?}", self.rewards[i]));
            if let Some(p) = &self.propensity {
                rec.push(format!("{:?}", p[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn observed_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Covariate columns in order; `None` takes every column that is not the
    /// dose, reward or propensity column.
    pub covariates: Option<Vec<String>>,
    pub dose: String,
    pub reward: String,
    /// Propensity column. When `None`, a column named `prop` is used if present.
    pub propensity: Option<String>,
    pub dose_min: Option<f64>,
    pub dose_max: Option<f64>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            covariates: None,
            dose: "a".into(),
            reward: "r".into(),
            propensity: None,
            dose_min: None,
            dose_max: None,
        }
    }
}

const DEFAULT_PROPENSITY_COLUMN: &str = "prop";

pub fn load_trial(path: impl AsRef<Path>, schema: &Schema) -> Result<DoseTrial> {
    let file = std::fs::File::open(path.as_ref())?;
    read_trial(file, schema)
}

/// Parses a trial from any CSV reader. Row numbers in errors are 1-based data rows.
pub fn read_trial<R: Read>(reader: R, schema: &Schema) -> Result<DoseTrial> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let dose_col = find(&schema.dose)?;
    let reward_col = find(&schema.reward)?;
    let prop_col = match &schema.propensity {
        Some(name) => Some(find(name)?),
        None => header.iter().position(|h| h == DEFAULT_PROPENSITY_COLUMN),
    };
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&c| c != dose_col && c != reward_col && Some(c) != prop_col)
            .collect(),
    };
    if cov_cols.is_empty() {
        return Err(Error::InvalidData("no covariate columns".into()));
    }

    let mut cov = Vec::new();
    let mut doses = Vec::new();
    let mut rewards = Vec::new();
    let mut prop = prop_col.map(|_| Vec::new());
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::BadCell {
                    row,
                    column: header[c].clone(),
                    message: format!("`{raw}` is not a finite number"),
                })
        };
        for &c in &cov_cols {
            cov.push(cell(c)?);
        }
        doses.push(cell(dose_col)?);
        rewards.push(cell(reward_col)?);
        if let (Some(c), Some(p)) = (prop_col, prop.as_mut()) {
            let v = cell(c)?;
            if v <= 0.0 {
                return Err(Error::BadCell {
                    row,
                    column: header[c].clone(),
                    message: format!("propensity {v} must be positive"),
                });
            }
            p.push(v);
        }
    }
    let n = doses.len();
    let covariates = DMatrix::from_row_slice(n, cov_cols.len(), &cov);
    let (lo, hi) = observed_range(&doses);
    let trial = DoseTrial::with_range(
        covariates,
        doses,
        rewards,
        prop,
        schema.dose_min.unwrap_or(lo),
        schema.dose_max.unwrap_or(hi),
    )?;
    trial.with_covariate_names(cov_cols.iter().map(|&c| header[c].clone()).collect())
}

/// Reads a covariate-only CSV (used for prediction). Returns the header and an
/// `m × k` matrix; an empty body yields a `0 × k` matrix.
pub fn read_covariates<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut m = 0;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, raw) in rec.iter().enumerate() {
            let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::BadCell {
                row: idx + 1,
                column: header.get(c).cloned().unwrap_or_default(),
                message: format!("`{raw}` is not a finite number"),
            })?;
            values.push(v);
        }
        m += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(m, header.len(), &values)))
}

/// The five simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl Setting {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Setting::S1),
            2 => Ok(Setting::S2),
            3 => Ok(Setting::S3),
            4 => Ok(Setting::S4),
            5 => Ok(Setting::S5),
            _ => Err(invalid(format!("setting must be 1..=5, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Setting::S1 => 1,
            Setting::S2 => 2,
            Setting::S3 => 3,
            Setting::S4 => 4,
            Setting::S5 => 5,
        }
    }

    /// Number of directions the optimal rule depends on.
    pub fn structural_dim(self) -> usize {
        match self {
            Setting::S1 | Setting::S2 => 2,
            _ => 1,
        }
    }
}

/// Ground truth for a synthetic setting: the coefficient vectors and closed
/// forms for the optimal dose and the mean reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    setting: Setting,
    beta1: Vec<f64>,
    beta2: Vec<f64>,
}

const BETA1_HEAD: [f64; 5] = [1.0, 0.5, 0.0, 0.0, -0.5];
const BETA2_HEAD: [f64; 5] = [0.5, 0.0, 0.5, -0.5, 1.0];

impl GroundTruth {
    pub fn new(setting: Setting, p: usize) -> Result<Self> {
        if p < 5 {
            return Err(invalid(format!("p must be at least 5, got {p}")));
        }
        let pad = |head: &[f64; 5]| {
            let mut v = vec![0.0; p];
            v[..5].copy_from_slice(head);
            v
        };
        Ok(Self {
            setting,
            beta1: pad(&BETA1_HEAD),
            beta2: pad(&BETA2_HEAD),
        })
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn p(&self) -> usize {
        self.beta1.len()
    }

    pub fn structural_dim(&self) -> usize {
        self.setting.structural_dim()
    }

    pub fn beta1(&self) -> &[f64] {
        &self.beta1
    }

    pub fn beta2(&self) -> &[f64] {
        &self.beta2
    }

    /// Directions the optimal rule depends on (`p × structural_dim`, not normalized).
    pub fn basis(&self) -> DMatrix<f64> {
        match self.setting {
            Setting::S1 | Setting::S2 => self.stack(&[&self.beta1, &self.beta2]),
            Setting::S3 | Setting::S5 => self.stack(&[&self.beta1]),
            Setting::S4 => self.stack(&[&self.beta2]),
        }
    }

    /// Directions the mean reward depends on (besides the dose).
    pub fn outcome_basis(&self) -> DMatrix<f64> {
        match self.setting {
            Setting::S5 => self.stack(&[&self.beta1]),
            _ => self.stack(&[&self.beta1, &self.beta2]),
        }
    }

    fn stack(&self, cols: &[&Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), cols.len(), |r, c| cols[c][r])
    }

    fn indices(&self, x: &[f64]) -> (f64, f64) {
        let dot = |b: &[f64]| b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
        (dot(&self.beta1), dot(&self.beta2))
    }

    pub fn optimal_dose(&self, x: &[f64]) -> f64 {
        let (u, v) = self.indices(x);
        optimal_dose_from_indices(self.setting, u, v)
    }

    pub fn mean_reward(&self, x: &[f64], a: f64) -> f64 {
        let (u, v) = self.indices(x);
        let f = optimal_dose_from_indices(self.setting, u, v);
        match self.setting {
            Setting::S1 => 7.0 + 0.5 * u * u + v - 13.0 * (f - a).abs(),
            Setting::S2 => {
                6.0 + 0.3 * (u.abs() + 0.5).ln() + indicator(v < 0.2) + 2.0 * indicator(v > -0.7)
                    - 16.0 * (f - a).powi(2)
            }
            Setting::S3 => -8.0 + 0.5 * v.abs() + 3.5 * v.cos() + 15.0 * (-(f - a).powi(4)).exp(),
            Setting::S4 => -5.0 + 1.5 * u.sin() + 3.0 * u.cos() + 12.0 * (-(f - a).powi(2)).exp(),
            Setting::S5 => 7.0 + 0.5 * u * u + 0.5 * u.abs() + 4.5 * u.cos() - 7.0 * (f - a).abs(),
        }
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `u = β₁ᵀx`, `v = β₂ᵀx`.
fn optimal_dose_from_indices(setting: Setting, u: f64, v: f64) -> f64 {
    match setting {
        Setting::S1 => (u * v).sin() + 0.75 * (u / (5.0 + (v + 4.0).powi(2))) + 1.0,
        Setting::S2 => {
            0.6 * indicator(u > -0.6) * indicator(v < 0.6) + 0.7 * (u.abs() + 0.5).ln() + 0.5
        }
        Setting::S3 => 3.0 / (5.0 * u * u + 2.5) + 1.0 / (u.powi(4) + 1.3),
        Setting::S4 => 0.7 / (v.abs() / 2.0 + 1.0) + 1.5 * (v.abs() + 1.0).ln() - 0.6,
        Setting::S5 => 0.5 * (-u.abs()).exp() + u.sin() + 0.9,
    }
}

/// Draws `n` observations from a setting. Deterministic in `seed` (ChaCha8).
pub fn generate_setting(setting: Setting, n: usize, p: usize, seed: u64) -> Result<(DoseTrial, GroundTruth)> {
    if n < 2 {
        return Err(invalid(format!("n must be at least 2, got {n}")));
    }
    let truth = GroundTruth::new(setting, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sample_covariates(setting, n, p, &mut rng);
    let dose_dist = Uniform::new_inclusive(SYNTHETIC_DOSE_RANGE.0, SYNTHETIC_DOSE_RANGE.1)
        .expect("static dose range");
    let noise = Normal::new(0.0, 1.0).expect("unit variance");
    let mut doses = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let a = dose_dist.sample(&mut rng);
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        rewards.push(truth.mean_reward(&row, a) + noise.sample(&mut rng));
        doses.push(a);
    }
    let trial = DoseTrial::with_range(
        x,
        doses,
        rewards,
        Some(vec![SYNTHETIC_PROPENSITY; n]),
        SYNTHETIC_DOSE_RANGE.0,
        SYNTHETIC_DOSE_RANGE.1,
    )?;
    Ok((trial, truth))
}

/// Covariates only, from the same distribution as [`generate_setting`].
pub fn sample_setting_covariates(setting: Setting, n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_covariates(setting, n, p, &mut rng)
}

fn sample_covariates(setting: Setting, n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    match setting {
        Setting::S1 | Setting::S2 => {
            let unif = Uniform::new_inclusive(-1.0, 1.0).expect("static range");
            DMatrix::from_fn(n, p, |_, _| unif.sample(rng))
        }
        Setting::S3 | Setting::S4 => DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng)),
        Setting::S5 => {
            let chol = ar1_covariance(p, 0.5)
                .cholesky()
                .expect("AR(1) covariance is positive definite");
            let z: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
            // rows z_i ~ N(0, I)  =>  L z_i ~ N(0, Σ)
            z * chol.l().transpose()
        }
    }
}

/// `Σ_ij = rho^|i-j|`.
pub fn ar1_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_minimal_csv() {
        let csv = "x1,x2,a,r\n0.1,0.2,1.0,3.0\n0.3,0.4,0.5,2.0\n-1,2,1.5,1.0\n";
        let t = read_trial(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!((t.n(), t.p()), (3, 2));
        assert!(t.propensity().is_none());
        assert_eq!(t.dose_range(), (0.5, 1.5));
        assert_eq!(t.covariates()[(2, 1)], 2.0);
        assert_eq!(t.covariate_names(), ["x1", "x2"]);
    }

    #[test]
    fn load_with_propensity_column() {
        let csv = "x1,x2,a,r,prop\n0.1,0.2,1.0,3.0,0.5\n0.3,0.4,0.5,2.0,0.25\n-1,2,1.5,1.0,1\n";
        let schema = Schema {
            propensity: Some("prop".into()),
            ..Schema::default()
        };
        let t = read_trial(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t.propensity().unwrap(), &[0.5, 0.25, 1.0]);
        assert_eq!(t.p(), 2);
    }

    #[test]
    fn load_rejects_na_naming_row_and_column() {
        let csv = "x1,x2,a,r\n0.1,0.2,1.0,3.0\n0.3,0.4,0.5,NA\n-1,2,1.5,1.0\n";
        match read_trial(csv.as_bytes(), &Schema::default()) {
            Err(Error::BadCell { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "r");
            }
            other => panic!("expected BadCell, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_missing_column_and_bad_propensity() {
        let csv = "x1,a,r\n0,1,1\n1,1,1\n";
        let schema = Schema {
            reward: "y".into(),
            ..Schema::default()
        };
        assert!(matches!(read_trial(csv.as_bytes(), &schema), Err(Error::MissingColumn(c)) if c == "y"));
        let csv = "x1,a,r,prop\n0,1,1,0.5\n1,1,1,0\n";
        assert!(matches!(
            read_trial(csv.as_bytes(), &Schema::default()),
            Err(Error::BadCell { row: 2, .. })
        ));
    }

    #[test]
    fn schema_range_override() {
        let csv = "x1,a,r\n0,1,1\n1,1.5,1\n";
        let schema = Schema {
            dose_min: Some(0.0),
            dose_max: Some(2.0),
            ..Schema::default()
        };
        let t = read_trial(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t.dose_range(), (0.0, 2.0));
    }

    #[test]
    fn csv_export_reloads() {
        let (t, _) = generate_setting(Setting::S2, 20, 6, 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_trial(
            buf.as_slice(),
            &Schema {
                dose_min: Some(0.0),
                dose_max: Some(2.0),
                ..Schema::default()
            },
        )
        .unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn generator_ranges_setting1() {
        let (t, gt) = generate_setting(Setting::S1, 400, 10, 7).unwrap();
        assert_eq!((t.n(), t.p()), (400, 10));
        assert!(t.doses().iter().all(|&a| (0.0..=2.0).contains(&a)));
        assert!(t.covariates().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(t.propensity().unwrap().iter().all(|&p| p == 0.5));
        assert_eq!(gt.structural_dim(), 2);
        assert_eq!(gt.basis().shape(), (10, 2));
    }

    #[test]
    fn generator_is_deterministic() {
        for s in 1..=5 {
            let setting = Setting::from_id(s).unwrap();
            let a = generate_setting(setting, 50, 8, 11).unwrap();
            let b = generate_setting(setting, 50, 8, 11).unwrap();
            assert_eq!(a, b);
            let c = generate_setting(setting, 50, 8, 12).unwrap();
            assert_ne!(a.0, c.0);
        }
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        assert!(generate_setting(Setting::S1, 100, 4, 0).is_err());
        assert!(generate_setting(Setting::S1, 1, 10, 0).is_err());
        assert!(Setting::from_id(6).is_err());
    }

    #[test]
    fn setting5_covariance_approaches_ar1() {
        let (t, _) = generate_setting(Setting::S5, 20_000, 10, 1).unwrap();
        let x = t.covariates();
        let n = x.nrows() as f64;
        let target = ar1_covariance(10, 0.5);
        let mean = x.row_mean();
        for i in 0..10 {
            for j in 0..10 {
                let c = x
                    .column(i)
                    .iter()
                    .zip(x.column(j).iter())
                    .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                assert!((c - target[(i, j)]).abs() < 0.05, "({i},{j}) {c}");
            }
        }
    }

    #[test]
    fn optimal_dose_closed_forms_at_origin() {
        let x = vec![0.0; 10];
        let s1 = GroundTruth::new(Setting::S1, 10).unwrap();
        assert_eq!(s1.optimal_dose(&x), 1.0);
        let s3 = GroundTruth::new(Setting::S3, 10).unwrap();
        assert!((s3.optimal_dose(&x) - (3.0 / 2.5 + 1.0 / 1.3)).abs() < 1e-15);
        assert!((s3.optimal_dose(&x) - 1.96923).abs() < 1e-5);
        let s2 = GroundTruth::new(Setting::S2, 10).unwrap();
        assert!((s2.optimal_dose(&x) - 0.61480).abs() < 1e-5);
    }

    #[test]
    fn mean_reward_setting1_at_origin() {
        let x = vec![0.0; 10];
        let s1 = GroundTruth::new(Setting::S1, 10).unwrap();
        assert_eq!(s1.mean_reward(&x, 1.0), 7.0);
        assert_eq!(s1.mean_reward(&x, 0.0), -6.0);
    }

    #[test]
    fn mean_reward_peaks_at_nearest_grid_point() {
        let grid: Vec<f64> = (0..=6000).map(|k| -2.0 + k as f64 * 1e-3).collect();
        for s in 1..=5 {
            let setting = Setting::from_id(s).unwrap();
            let gt = GroundTruth::new(setting, 10).unwrap();
            let xs = sample_setting_covariates(setting, 100, 10, 99 + s as u64);
            for i in 0..xs.nrows() {
                let x: Vec<f64> = xs.row(i).iter().copied().collect();
                let f = gt.optimal_dose(&x);
                assert!(grid[0] < f && f < grid[grid.len() - 1]);
                let best = grid
                    .iter()
                    .copied()
                    .fold((f64::NEG_INFINITY, 0.0), |(bv, ba), a| {
                        let v = gt.mean_reward(&x, a);
                        if v > bv {
                            (v, a)
                        } else {
                            (bv, ba)
                        }
                    })
                    .1;
                let nearest = grid
                    .iter()
                    .copied()
                    .min_by(|a, b| (a - f).abs().total_cmp(&(b - f).abs()))
                    .unwrap();
                assert!((best - nearest).abs() < 1e-12, "setting {s}: {best} vs {nearest}");
            }
        }
    }

    #[test]
    fn setting5_ignores_directions_orthogonal_to_beta1() {
        let gt = GroundTruth::new(Setting::S5, 10).unwrap();
        let b1 = gt.beta1().to_vec();
        let b1n: f64 = b1.iter().map(|v| v * v).sum();
        let xs = sample_setting_covariates(Setting::S5, 20, 10, 5);
        let dirs = sample_setting_covariates(Setting::S1, 20, 10, 6);
        for i in 0..20 {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let mut v: Vec<f64> = dirs.row(i).iter().copied().collect();
            let proj = v.iter().zip(&b1).map(|(a, b)| a * b).sum::<f64>() / b1n;
            v.iter_mut().zip(&b1).for_each(|(a, b)| *a -= proj * b);
            let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + 3.0 * b).collect();
            assert!((gt.optimal_dose(&x) - gt.optimal_dose(&y)).abs() < 1e-12);
            assert!((gt.mean_reward(&x, 0.7) - gt.mean_reward(&y, 0.7)).abs() < 1e-12);
        }
    }
}
