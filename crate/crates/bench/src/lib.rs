//! Fixtures shared by the benchmarks.

use dosefind_core::direct::{dose_grid, rule_stage};
use dosefind_core::kernel::reduced_dose_bandwidth;
use dosefind_core::stiefel::random_orthonormal;
use dosefind_core::{generate_setting, Bandwidth, BandwidthRule, DirectOptions, DoseTrial, OrthonormalBasis, Setting};
use nalgebra::DMatrix;

pub struct Fixture {
    pub trial: DoseTrial,
    pub basis: OrthonormalBasis,
    /// Reduced-space bandwidth at `basis`.
    pub bandwidth: Bandwidth,
}

/// Setting 1 data of size `n` with a random `p × d` start.
pub fn fixture(n: usize, p: usize, d: usize) -> Fixture {
    let (trial, _) = generate_setting(Setting::S1, n, p, 17).expect("valid setting");
    let basis = random_orthonormal(p, d, 5).expect("valid shape");
    let z = basis.project(trial.covariates());
    let bandwidth = reduced_dose_bandwidth(&z, trial.doses(), d, BandwidthRule::Silverman).expect("positive spread");
    Fixture { trial, basis, bandwidth }
}

/// Ridge dose rule fitted at the fixture's basis, as a closure on reduced covariates.
pub fn fitted_rule(f: &Fixture) -> impl Fn(&[f64]) -> f64 + Sync {
    let grid = dose_grid(&f.trial, None).expect("grid");
    let stage = rule_stage(&f.trial, &f.basis, &grid, &DirectOptions::default()).expect("rule stage");
    let function = stage.function;
    move |z: &[f64]| function.eval(z)
}

/// A skew-symmetric `p × p` matrix with entries of unit order.
pub fn skew(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4,
        std::cmp::Ordering::Greater => -(((j * 7 + i * 3) % 5) as f64 / 5.0 - 0.4),
        std::cmp::Ordering::Equal => 0.0,
    })
}
