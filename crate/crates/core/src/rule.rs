//! Common surface of fitted dose rules.

use nalgebra::DMatrix;

/// A fitted individualized dose rule on the original covariates.
pub trait DoseRule: Sync {
    /// Recommended dose for one covariate vector, inside the rule's dose range.
    fn recommend(&self, x: &[f64]) -> f64;

    /// Number of covariates the rule expects.
    fn covariate_dim(&self) -> usize;

    fn dose_range(&self) -> (f64, f64);

    /// One recommendation per row of `x`.
    fn recommend_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.recommend(&row)
            })
            .collect()
    }
}
