//! Flat `key = value` run configuration.
//!
//! Every key has a documented default; [`RunConfig::to_canonical`] writes all
//! keys in a fixed order so that `parse(to_canonical(c)) == c` and parsing any
//! file then re-emitting it yields the same text for equal configs.

use std::fmt::Write as _;
use std::str::FromStr;

use dosefind_core::{BandwidthRule, Method, OptimizerOptions, Setting};
use serde::{Deserialize, Serialize};

use crate::CliError;

const AUTO: &str = "auto";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Fitted dimension. `fit` uses 2 when unset; `simulate` uses the
    /// setting's default for the method.
    pub d: Option<usize>,
    /// Simulation setting (1–5) for `simulate`, `generate` and oracle metrics.
    pub setting: Option<u8>,
    pub p: usize,
    /// Training sample size for `simulate` and `generate`.
    pub n: usize,
    pub n_test: usize,
    pub reps: usize,
    pub seed: u64,
    /// Dose grid size; `⌈√n⌉` when unset.
    pub q: Option<usize>,
    pub loo: bool,
    pub restarts: usize,
    pub max_iters: usize,
    pub epsilon: f64,
    pub grad_step: f64,
    pub bandwidth: BandwidthRule,
    /// Ridge penalties for GCV; `10` log-spaced values in `[1e-4, 1e2]·n` when unset.
    pub lambda_grid: Option<Vec<f64>>,
    pub threads: Option<usize>,
    pub dose_column: String,
    pub reward_column: String,
    /// `prop` is picked up automatically when unset.
    pub propensity_column: Option<String>,
    /// Dose range of fitted rules; the observed range when unset.
    pub dose_min: Option<f64>,
    pub dose_max: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerOptions::default();
        Self {
            method: Method::Direct,
            d: None,
            setting: None,
            p: 10,
            n: 400,
            n_test: 3000,
            reps: 10,
            seed: 0,
            q: None,
            loo: false,
            restarts: opt.restarts,
            max_iters: opt.max_iters,
            epsilon: opt.epsilon,
            grad_step: opt.grad_step,
            bandwidth: BandwidthRule::Silverman,
            lambda_grid: None,
            threads: None,
            dose_column: "a".into(),
            reward_column: "r".into(),
            propensity_column: None,
            dose_min: None,
            dose_max: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("config key `{key}`: cannot use `{value}`: {why}"))
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    if value == AUTO {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_positive(key: &str, value: &str) -> Result<f64, CliError> {
    let v: f64 = parse_num(key, value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "must be a positive finite number"))
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| AUTO.to_owned(), ToString::to_string)
}

pub fn parse_bandwidth(value: &str) -> Result<BandwidthRule, CliError> {
    if value == "silverman" {
        return Ok(BandwidthRule::Silverman);
    }
    match value.strip_prefix("fixed:") {
        Some(h) => Ok(BandwidthRule::Fixed(parse_positive("bandwidth", h)?)),
        None => Err(bad("bandwidth", value, "expected `silverman` or `fixed:<h>`")),
    }
}

fn bandwidth_str(rule: BandwidthRule) -> String {
    match rule {
        BandwidthRule::Silverman => "silverman".into(),
        BandwidthRule::Fixed(h) => format!("fixed:{h}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "method" => self.method = value.parse().map_err(|e| bad(key, value, e))?,
            "d" => self.d = parse_opt(key, value)?,
            "setting" => self.setting = parse_opt(key, value)?,
            "p" => self.p = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "reps" => self.reps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "q" => self.q = parse_opt(key, value)?,
            "loo" => self.loo = parse_num(key, value)?,
            "restarts" => self.restarts = parse_num(key, value)?,
            "max_iters" => self.max_iters = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_positive(key, value)?,
            "grad_step" => self.grad_step = parse_positive(key, value)?,
            "bandwidth" => self.bandwidth = parse_bandwidth(value)?,
            "lambda_grid" => {
                self.lambda_grid = if value == AUTO {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|s| parse_positive(key, s.trim()))
                            .collect::<Result<_, _>>()?,
                    )
                }
            }
            "threads" => self.threads = parse_opt(key, value)?,
            "dose_column" => self.dose_column = value.to_owned(),
            "reward_column" => self.reward_column = value.to_owned(),
            "propensity_column" => {
                self.propensity_column = (value != AUTO).then(|| value.to_owned());
            }
            "dose_min" => self.dose_min = parse_opt(key, value)?,
            "dose_max" => self.dose_max = parse_opt(key, value)?,
            _ => return Err(CliError::Input(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(s) = self.setting {
            Setting::from_id(s).map_err(|e| CliError::Input(e.to_string()))?;
        }
        if self.d == Some(0) {
            return Err(CliError::Input("d must be at least 1".into()));
        }
        if self.q.is_some_and(|q| q < 2) {
            return Err(CliError::Input("q must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Input("threads must be at least 1".into()));
        }
        if matches!(&self.lambda_grid, Some(g) if g.is_empty()) {
            return Err(CliError::Input("lambda_grid must not be empty".into()));
        }
        if let (Some(lo), Some(hi)) = (self.dose_min, self.dose_max) {
            if !(lo <= hi) {
                return Err(CliError::Input(format!("dose_min {lo} exceeds dose_max {hi}")));
            }
        }
        self.optimizer().validate().map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn to_canonical(&self) -> String {
        let lambda = self.lambda_grid.as_ref().map_or_else(
            || AUTO.to_owned(),
            |g| g.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        let entries: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("d", opt_str(&self.d)),
            ("setting", opt_str(&self.setting)),
            ("p", self.p.to_string()),
            ("n", self.n.to_string()),
            ("n_test", self.n_test.to_string()),
            ("reps", self.reps.to_string()),
            ("seed", self.seed.to_string()),
            ("q", opt_str(&self.q)),
            ("loo", self.loo.to_string()),
            ("restarts", self.restarts.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("grad_step", self.grad_step.to_string()),
            ("bandwidth", bandwidth_str(self.bandwidth)),
            ("lambda_grid", lambda),
            ("threads", opt_str(&self.threads)),
            ("dose_column", self.dose_column.clone()),
            ("reward_column", self.reward_column.clone()),
            ("propensity_column", opt_str(&self.propensity_column)),
            ("dose_min", opt_str(&self.dose_min)),
            ("dose_max", opt_str(&self.dose_max)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Optimizer options; the fitting routines set the optimization sense.
    pub fn optimizer(&self) -> OptimizerOptions {
        OptimizerOptions {
            restarts: self.restarts,
            max_iters: self.max_iters,
            epsilon: self.epsilon,
            grad_step: self.grad_step,
            ..OptimizerOptions::default()
        }
    }

    pub fn setting(&self) -> Result<Option<Setting>, CliError> {
        self.setting
            .map(Setting::from_id)
            .transpose()
            .map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn require_setting(&self) -> Result<Setting, CliError> {
        self.setting()?
            .ok_or_else(|| CliError::Input("this command needs --setting".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_canonical();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_canonical(), text);
    }

    #[test]
    fn every_field_round_trips() {
        let c = RunConfig {
            method: Method::PseudoDirect,
            d: Some(3),
            setting: Some(4),
            p: 12,
            n: 250,
            n_test: 77,
            reps: 3,
            seed: u64::MAX,
            q: Some(9),
            loo: true,
            restarts: 2,
            max_iters: 17,
            epsilon: 1.2345678901234567e-9,
            grad_step: 3e-5,
            bandwidth: BandwidthRule::Fixed(0.1 + 0.2),
            lambda_grid: Some(vec![0.1, 1.0 / 3.0, 7e-300]),
            threads: Some(3),
            dose_column: "dose".into(),
            reward_column: "y".into(),
            propensity_column: Some("ps".into()),
            dose_min: Some(-0.5),
            dose_max: None,
        };
        let text = c.to_canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn comments_whitespace_and_order_do_not_matter() {
        let a = RunConfig::parse("# campaign\n  seed=5 \n\nmethod =pseudo\n").unwrap();
        let b = RunConfig::parse("method = pseudo_direct\nseed = 5\n").unwrap();
        assert_eq!(a.to_canonical(), b.to_canonical());
        assert_eq!(a.seed, 5);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense",
            "colour = blue",
            "d = -1",
            "d = 0",
            "setting = 6",
            "epsilon = 0",
            "bandwidth = wide",
            "loo = maybe",
            "restarts = 0",
            "lambda_grid = 1,-2",
            "dose_min = 2\ndose_max = 1",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(CliError::Input(_))),
                "accepted {text:?}"
            );
        }
    }
}
