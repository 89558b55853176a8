//! Scalar human/LLM co-adaptation: prompt specificity `x` against model alignment `y`.

use serde::{Deserialize, Serialize};

use crate::agent::{
    AgentSpec, BeliefRule, BeliefState, Emission, MultilevelAgentState, NeuralParams, NeuralRule,
    OperatorPeriods, Policy, PolicyRule,
};
use crate::error::{MieError, Result};
use crate::game::{repeated_game, TabularMarkovGame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_alpha_h")]
    pub alpha_h: f64,
    #[serde(default = "default_alpha_m")]
    pub alpha_m: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_y0")]
    pub y0: f64,
}

fn default_alpha_h() -> f64 {
    0.2
}
fn default_alpha_m() -> f64 {
    0.3
}
fn default_x0() -> f64 {
    0.9
}
fn default_y0() -> f64 {
    0.1
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            alpha_h: default_alpha_h(),
            alpha_m: default_alpha_m(),
            x0: default_x0(),
            y0: default_y0(),
        }
    }
}

/// One exact step of both update rules. `U` is evaluated before the update.
pub fn toy_step(x: f64, y: f64, alpha_h: f64, alpha_m: f64) -> (f64, f64, f64) {
    let d = x - y;
    (x - 2.0 * alpha_h * d, y + alpha_m * d, 1.0 - d * d)
}

/// `kappa = 1 - 2 alpha_H - alpha_M`; the mismatch contracts iff `|kappa| < 1`.
pub fn toy_contraction_factor(alpha_h: f64, alpha_m: f64) -> (f64, bool) {
    let kappa = 1.0 - 2.0 * alpha_h - alpha_m;
    (kappa, kappa.abs() < 1.0)
}

/// Where the line attractor catches a start point: `alpha_M x + 2 alpha_H y` is conserved.
pub fn toy_attractor(cfg: &ToyConfig) -> f64 {
    (cfg.alpha_m * cfg.x0 + 2.0 * cfg.alpha_h * cfg.y0) / (2.0 * cfg.alpha_h + cfg.alpha_m)
}

/// Mismatch series `d_0..=d_T` from the update rules, re-anchored each tick on the
/// conserved line so that `d` keeps full relative precision however small it gets.
///
/// In plain `(x, y)` coordinates the difference `x - y` loses relative accuracy once it
/// falls towards the rounding floor of `x` and `y` themselves.
pub fn toy_mismatch_series(alpha_h: f64, alpha_m: f64, d0: f64, horizon: usize) -> Vec<f64> {
    let total = 2.0 * alpha_h + alpha_m;
    let (wx, wy) = if total > 0.0 {
        (2.0 * alpha_h / total, alpha_m / total)
    } else {
        (0.5, 0.5)
    };
    let mut out = Vec::with_capacity(horizon + 1);
    let mut d = d0;
    out.push(d);
    for _ in 0..horizon {
        let (x, y, _) = toy_step(wx * d, -wy * d, alpha_h, alpha_m);
        d = x - y;
        out.push(d);
    }
    out
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_h", self.alpha_h), ("alpha_m", self.alpha_m)] {
            // zero is allowed; it freezes that side
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MieError::usage(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("x0", self.x0), ("y0", self.y0)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MieError::usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub(super) fn build(&self) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
        self.validate()?;
        let game = repeated_game(vec![1, 1], vec![vec![0.0], vec![0.0]], 0.95)?;
        let spec = |name: &str, source: usize, gain: f64| AgentSpec {
            name: name.into(),
            belief_rule: BeliefRule::Track { source, gain },
            neural_rule: NeuralRule::Static,
            policy_rule: PolicyRule::Fixed,
            emission: Emission::BeliefMean,
            periods: OperatorPeriods::default(),
        };
        let state = |v: f64| MultilevelAgentState {
            theta: NeuralParams::new(vec![], 0.0),
            belief: BeliefState::point(vec![v]),
            policy: Policy::tabular_constant(vec![vec![1.0]], 11, None),
        };
        Ok((
            game,
            vec![
                spec("human", 1, 2.0 * self.alpha_h),
                spec("llm", 0, self.alpha_m),
            ],
            vec![state(self.x0), state(self.y0)],
        ))
    }
}
