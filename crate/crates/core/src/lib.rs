//! Dimension-reduced estimation of optimal individualized dose rules.
//!
//! Two estimators share one engine:
//!
//! * [`direct::fit_direct`] alternates between a kernel-ridge dose rule fitted to
//!   grid-argmax pseudo-doses and an ascent step of the kernel-estimated value
//!   function over orthonormal bases.
//! * [`pseudo::fit_pseudo_direct`] minimizes the Nadaraya-Watson residual
//!   objective over orthonormal bases, then plugs the reduced covariates into a
//!   grid-kernel dose rule.
//!
//! Both searches run on the Stiefel manifold `{B : BᵀB = I}` with Cayley-transform
//! updates ([`stiefel`]). [`dataset`] holds the observed-trial type and the five
//! synthetic generators, [`eval`] the metrics and the replication runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod direct;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod pseudo;
pub mod rule;
pub mod stiefel;
mod surface;

pub use dataset::{generate_setting, load_trial, DoseTrial, GroundTruth, Schema, Setting};
pub use direct::{fit_direct, DirectFit, DirectOptions, DoseGrid, KernelRidgeRule};
pub use error::{Error, Result};
pub use eval::{run_experiment, ExperimentConfig, ExperimentResults, Method, MetricSet};
pub use kernel::{Bandwidth, BandwidthRule, BandwidthSpec};
pub use pseudo::{fit_pseudo_direct, GridKernelRule, PseudoFit, PseudoOptions};
pub use rule::DoseRule;
pub use stiefel::{FitReport, OptimizerOptions, OrthonormalBasis, Sense, Termination};
