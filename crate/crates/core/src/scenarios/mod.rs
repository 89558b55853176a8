//! Executable scenarios: a game, agent operator specs and initial agent states, plus
//! scenario-specific metrics.

mod bmi;
mod highway;
mod matrix;
mod pathological;
mod toy;

pub use bmi::{bmi_scalar_factor, gain_error, BmiConfig};
pub use highway::{HighwayConfig, ACCELERATE, HOLD, YIELD};
pub use matrix::{nash_profiles, payoffs, Learner, MatrixGameConfig, MatrixGameName};
pub use pathological::{AnxietyPolicy, PathologicalConfig, Variant, ENGAGE, WITHDRAW};
pub use toy::{toy_attractor, toy_contraction_factor, toy_mismatch_series, toy_step, ToyConfig};

use serde::{Deserialize, Serialize};

use crate::agent::{
    AgentSpec, BeliefRule, BeliefState, Emission, MultilevelAgentState, NeuralParams, NeuralRule,
    OperatorPeriods, Policy, PolicyRule, StepRecord,
};
use crate::error::{MieError, Result};
use crate::game::{repeated_game, GameSpec, TabularMarkovGame};

/// `x <- A x` on a single agent's belief mean; a test system with a known Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub matrix: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomAgent {
    pub spec: AgentSpec,
    pub state: MultilevelAgentState,
}

/// A game file plus explicitly wired agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomConfig {
    pub game: GameSpec,
    pub agents: Vec<CustomAgent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Toy(ToyConfig),
    MatrixGame(MatrixGameConfig),
    HighwayMerge(HighwayConfig),
    Bmi(BmiConfig),
    Pathological(PathologicalConfig),
    Linear(LinearConfig),
    Custom(CustomConfig),
}

impl ScenarioConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioConfig::Toy(_) => "toy",
            ScenarioConfig::MatrixGame(_) => "matrix_game",
            ScenarioConfig::HighwayMerge(_) => "highway_merge",
            ScenarioConfig::Bmi(_) => "bmi",
            ScenarioConfig::Pathological(_) => "pathological",
            ScenarioConfig::Linear(_) => "linear",
            ScenarioConfig::Custom(_) => "custom",
        }
    }

    /// Returns a copy with `key` (a top-level field of the scenario table) set to `value`.
    pub fn with_value(&self, key: &str, value: f64) -> Result<ScenarioConfig> {
        let mut v = serde_json::to_value(self)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| MieError::usage("scenario config is not a table"))?;
        if key == "kind" {
            return Err(MieError::usage("cannot sweep the scenario kind"));
        }
        obj.insert(key.to_string(), serde_json::json!(value));
        serde_json::from_value(v).map_err(|e| MieError::usage(format!("setting `{key}`: {e}")))
    }
}

/// A built, validated scenario. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub game: TabularMarkovGame,
    pub specs: Vec<AgentSpec>,
    pub initial: Vec<MultilevelAgentState>,
}

fn linear_build(cfg: &LinearConfig) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
    let game = repeated_game(vec![1], vec![vec![0.0]], 0.95)?;
    let spec = AgentSpec {
        name: "linear".into(),
        belief_rule: BeliefRule::Linear {
            matrix: cfg.matrix.clone(),
        },
        neural_rule: NeuralRule::Static,
        policy_rule: PolicyRule::Fixed,
        emission: Emission::None,
        periods: OperatorPeriods::default(),
    };
    let state = MultilevelAgentState {
        theta: NeuralParams::new(vec![], 0.0),
        belief: BeliefState::point(cfg.x0.clone()),
        policy: Policy::tabular_constant(vec![vec![1.0]], 11, None),
    };
    Ok((game, vec![spec], vec![state]))
}

impl Scenario {
    pub fn build(config: ScenarioConfig) -> Result<Scenario> {
        let (game, specs, initial) = match &config {
            ScenarioConfig::Toy(c) => c.build()?,
            ScenarioConfig::MatrixGame(c) => c.build()?,
            ScenarioConfig::HighwayMerge(c) => c.build()?,
            ScenarioConfig::Bmi(c) => c.build()?,
            ScenarioConfig::Pathological(c) => c.build()?,
            ScenarioConfig::Linear(c) => linear_build(c)?,
            ScenarioConfig::Custom(c) => (
                TabularMarkovGame::new(c.game.clone())?,
                c.agents.iter().map(|a| a.spec.clone()).collect(),
                c.agents.iter().map(|a| a.state.clone()).collect(),
            ),
        };
        if specs.len() != game.num_agents() || initial.len() != game.num_agents() {
            return Err(MieError::usage(format!(
                "game has {} agents but {} agent specs were given",
                game.num_agents(),
                specs.len()
            )));
        }
        for (i, (spec, state)) in specs.iter().zip(&initial).enumerate() {
            spec.check(&game, i, state).map_err(|e| e.for_agent(i))?;
        }
        Ok(Scenario {
            config,
            game,
            specs,
            initial,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.game.num_agents()
    }

    pub fn metric_names(&self) -> Vec<String> {
        let names: &[&str] = match &self.config {
            ScenarioConfig::Toy(_) => &["x", "y", "U", "d"],
            ScenarioConfig::MatrixGame(_) => &["p0", "p1"],
            ScenarioConfig::Bmi(_) => &["gain_error", "tracking_error"],
            ScenarioConfig::Pathological(_) => &["belief", "p_engage"],
            ScenarioConfig::Linear(_) => &["norm"],
            ScenarioConfig::HighwayMerge(_) | ScenarioConfig::Custom(_) => &[],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Per-tick scalars, evaluated on the agent states the tick started from.
    pub fn metrics(&self, agents: &[MultilevelAgentState], record: &StepRecord) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Toy(_) => {
                let x = agents[0].belief.values()[0];
                let y = agents[1].belief.values()[0];
                let d = x - y;
                vec![x, y, 1.0 - d * d, d]
            }
            ScenarioConfig::MatrixGame(_) => (0..2)
                .map(|i| agents[i].policy.distribution(0, &agents[i].belief)[0])
                .collect(),
            ScenarioConfig::Bmi(c) => {
                let target = &c.targets()[record.state];
                let tracking = record
                    .signals
                    .get(1)
                    .map(|u| u.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
                    .unwrap_or(0.0);
                vec![gain_error(&agents[1].theta.values, &agents[0].theta.values), tracking]
            }
            ScenarioConfig::Pathological(_) => vec![
                agents[0].belief.values()[0],
                agents[0].policy.distribution(record.state, &agents[0].belief)[ENGAGE],
            ],
            ScenarioConfig::Linear(_) => {
                vec![agents[0].belief.values().iter().map(|v| v * v).sum::<f64>().sqrt()]
            }
            ScenarioConfig::HighwayMerge(_) | ScenarioConfig::Custom(_) => vec![],
        }
    }

    /// Low-dimensional summary used to label attractors.
    pub fn observables(&self, agents: &[MultilevelAgentState]) -> Vec<f64> {
        match &self.config {
            ScenarioConfig::Toy(_) => vec![agents[0].belief.values()[0], agents[1].belief.values()[0]],
            ScenarioConfig::MatrixGame(_) => (0..2)
                .map(|i| agents[i].policy.distribution(0, &agents[i].belief)[0])
                .collect(),
            ScenarioConfig::Bmi(_) => {
                vec![gain_error(&agents[1].theta.values, &agents[0].theta.values)]
            }
            ScenarioConfig::Pathological(_) | ScenarioConfig::Linear(_) => agents[0].belief.values().to_vec(),
            ScenarioConfig::HighwayMerge(_) | ScenarioConfig::Custom(_) => {
                crate::equilibrium::flatten(agents)
            }
        }
    }
}
