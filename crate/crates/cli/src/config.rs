//! Experiment configuration files (TOML or JSON).

use std::path::{Path, PathBuf};

use mie_core::equilibrium::{
    Axis, BasinMethod, BasinOptions, DistanceWeights, Expectation, FixedPointOptions, StateWeighting,
    ToleranceConfig,
};
use mie_core::scenarios::ScenarioConfig;
use mie_core::sim::{PerturbationSpec, RunConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const MAX_SWEEP_CELLS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Residuals, gaps and the joint verdict.
    #[serde(default = "yes")]
    pub mie: bool,
    /// Fixed point, Jacobian and eigenvalue classification.
    #[serde(default = "yes")]
    pub stability: bool,
    /// Exact when every emission is deterministic, otherwise Monte Carlo.
    #[serde(default)]
    pub expectation: Option<Expectation>,
    #[serde(default)]
    pub weighting: StateWeighting,
    #[serde(default)]
    pub fixed_point: FixedPointOptions,
    #[serde(default = "default_step")]
    pub jacobian_step: f64,
}

fn yes() -> bool {
    true
}
fn default_step() -> f64 {
    1e-5
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            mie: true,
            stability: true,
            expectation: None,
            weighting: StateWeighting::default(),
            fixed_point: FixedPointOptions::default(),
            jacobian_step: default_step(),
        }
    }
}

/// Grid sweep; `method` selects fixed-point iteration or simulation per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axes: Vec<Axis>,
    #[serde(flatten)]
    pub method: BasinMethod,
    #[serde(default = "default_merge")]
    pub merge_tol: f64,
}

fn default_merge() -> f64 {
    1e-4
}

impl SweepConfig {
    pub fn options(&self) -> BasinOptions {
        BasinOptions {
            method: self.method,
            merge_tol: self.merge_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Additive count smoothing for empirical policies.
    #[serde(default = "one")]
    pub smoothing: f64,
    #[serde(default = "default_depths")]
    pub depths: Vec<u8>,
    #[serde(default = "half")]
    pub holdout: f64,
    #[serde(default = "yes")]
    pub cca: bool,
    #[serde(default = "default_k")]
    pub cca_components: usize,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_depths() -> Vec<u8> {
    vec![0, 1, 2]
}
fn default_k() -> usize {
    1
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            smoothing: 1.0,
            depths: default_depths(),
            holdout: 0.5,
            cca: true,
            cca_components: default_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    /// Level weights of the distance to equilibrium.
    #[serde(default)]
    pub weights: DistanceWeights,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Parses TOML or JSON (by extension) into a generic JSON value.
fn parse_value(path: &Path, text: &str) -> Result<serde_json::Value, Failure> {
    if is_json(path) {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, Failure> {
        let value = parse_value(path, text)?;
        let scenario = value
            .get("scenario")
            .ok_or_else(|| Failure::config(format!("{}: missing table `scenario`", path.display())))?;
        if scenario.get("kind").is_none() {
            return Err(Failure::config(format!("{}: missing key `scenario.kind`", path.display())));
        }
        if value.get("run").is_none() {
            return Err(Failure::config(format!("{}: missing table `run`", path.display())));
        }
        // a second, typed pass keeps the parser's line and key diagnostics
        let cfg: ExperimentConfig = if is_json(path) {
            serde_json::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        };
        cfg.validate().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.run.validate().map_err(|e| e.to_string())?;
        self.tolerances.validate().map_err(|e| e.to_string())?;
        if !(self.analysis.jacobian_step > 0.0 && self.analysis.jacobian_step.is_finite()) {
            return Err("analysis.jacobian_step must be positive".into());
        }
        if !(self.estimate.holdout > 0.0 && self.estimate.holdout <= 0.5) {
            return Err("estimate.holdout must lie in (0, 0.5]".into());
        }
        if let Some(s) = &self.sweep {
            let cells = s.axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.steps));
            match cells {
                Some(n) if n <= MAX_SWEEP_CELLS => {}
                _ => return Err(format!("sweep grid exceeds {MAX_SWEEP_CELLS} cells")),
            }
        }
        Ok(())
    }

    /// Applies a `--seed` override to the run and to a rollout sweep.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.run.seed = seed;
            if let Some(SweepConfig {
                method: BasinMethod::Rollout { seed: s, .. },
                ..
            }) = &mut self.sweep
            {
                *s = seed;
            }
        }
        self
    }

    pub fn seed(&self) -> u64 {
        match &self.sweep {
            Some(SweepConfig {
                method: BasinMethod::Rollout { seed, .. },
                ..
            }) => *seed,
            _ => self.run.seed,
        }
    }
}
