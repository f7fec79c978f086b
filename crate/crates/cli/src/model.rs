//! Versioned JSON model artifacts.

use std::path::Path;

use dosefind_core::{DoseRule, FitReport, GridKernelRule, KernelRidgeRule, Method, OrthonormalBasis};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const FORMAT: &str = "dosefind-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FittedRule {
    KernelRidge(KernelRidgeRule),
    GridKernel(GridKernelRule),
}

impl FittedRule {
    pub fn as_rule(&self) -> &dyn DoseRule {
        match self {
            FittedRule::KernelRidge(r) => r,
            FittedRule::GridKernel(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub covariate_names: Vec<String>,
    pub dose_range: (f64, f64),
    /// Estimated basis; absent for the no-reduction baseline.
    pub basis: Option<OrthonormalBasis>,
    /// Final objective: empirical value for direct learning, ψ for pseudo-direct.
    pub objective: Option<f64>,
    pub report: Option<FitReport>,
    pub rule: FittedRule,
    pub config: RunConfig,
}

impl Model {
    pub fn p(&self) -> usize {
        self.rule.as_rule().covariate_dim()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.rule.as_rule().recommend_all(x)
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Numerical(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let head: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("model file is not JSON: {e}")))?;
        if head.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(CliError::Input("not a dosefind model file".into()));
        }
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            other => return Err(CliError::Input(format!("unsupported model version {other:?}"))),
        }
        let model: Model =
            serde_json::from_value(head).map_err(|e| CliError::Input(format!("malformed model file: {e}")))?;
        model.check()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<(), CliError> {
        let validated = match &self.rule {
            FittedRule::KernelRidge(r) => r.function().validate(),
            FittedRule::GridKernel(r) => r.validate(),
        };
        validated.map_err(|e| CliError::Input(format!("malformed model file: {e}")))?;
        if self.covariate_names.len() != self.p() {
            return Err(CliError::Input("model covariate names do not match the rule".into()));
        }
        if self.basis.as_ref().is_some_and(|b| b.p() != self.p()) {
            return Err(CliError::Input("model basis does not match the rule".into()));
        }
        Ok(())
    }
}
