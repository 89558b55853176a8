use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;

use super::{BeliefDist, MultilevelAgentState, Policy};

/// Operator kinds and update periods for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    #[serde(default)]
    pub name: String,
    pub belief_rule: BeliefRule,
    pub neural_rule: NeuralRule,
    pub policy_rule: PolicyRule,
    #[serde(default)]
    pub emission: Emission,
    #[serde(default)]
    pub periods: OperatorPeriods,
}

/// Apply each operator only on ticks that are multiples of its period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorPeriods {
    #[serde(default = "one")]
    pub belief: u64,
    #[serde(default = "one")]
    pub neural: u64,
    #[serde(default = "one")]
    pub policy: u64,
}

fn one() -> u64 {
    1
}

impl Default for OperatorPeriods {
    fn default() -> Self {
        OperatorPeriods {
            belief: 1,
            neural: 1,
            policy: 1,
        }
    }
}

impl OperatorPeriods {
    pub fn validate(&self) -> Result<()> {
        if self.belief == 0 || self.neural == 0 || self.policy == 0 {
            return Err(MieError::usage("operator periods must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case")]
pub enum BeliefRate {
    /// `1 / (prior_weight + n + 1)` after `n` absorbed updates: a running average.
    Harmonic { prior_weight: f64 },
    Constant { rate: f64 },
}

impl BeliefRate {
    pub fn at(&self, updates: u64) -> f64 {
        match *self {
            BeliefRate::Harmonic { prior_weight } => 1.0 / (prior_weight + updates as f64 + 1.0),
            BeliefRate::Constant { rate } => rate,
        }
    }
}

/// Cognitive update operator F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BeliefRule {
    Static,
    /// Posterior over opponent types: `likelihoods[xi][opponent action]`.
    /// At depth 2 the nested belief is updated from the agent's own action with
    /// `nested_likelihoods[xi'][own action]`.
    Bayes {
        likelihoods: Vec<Vec<f64>>,
        #[serde(default)]
        nested_likelihoods: Option<Vec<Vec<f64>>>,
    },
    /// Fictitious-play frequency over opponent actions (own actions for the nested level).
    EmpiricalFrequency { rate: BeliefRate },
    /// Gaussian mean tracks another agent's signal: `b + gain * (signal - b)`.
    Track { source: usize, gain: f64 },
    /// Gaussian mean `M` models the linear map from agent `input`'s signal to agent
    /// `output`'s signal; normalised LMS `M + gain * (y - M x) x^T / |x|^2`.
    LinearModel { input: usize, output: usize, gain: f64 },
    /// `clamp((1 - rate) b + rate (o - bias), 0, 1)` with `o = 1` when the observed
    /// outcome state equals `rewarding_state`.
    BiasedOutcome { rate: f64, bias: f64, rewarding_state: usize },
    /// Moves toward the outcome indicator only on ticks where the agent chose `gate_action`.
    GatedOutcome { rate: f64, gate_action: usize, event_state: usize },
    /// `b' = A b` on the Gaussian mean (used for linear test systems).
    Linear { matrix: Vec<Vec<f64>> },
}

/// Neural learning operator G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum NeuralRule {
    Static,
    /// Tabular Q-learning on `theta = Q[s][a]`.
    QLearning { discount: f64 },
    /// Encoder matrix `E` (row-major, `dim x dim`) descending the squared target error,
    /// with the decoder taken from the agent's own belief (a `LinearModel`).
    /// Feedback is the signal of agent `feedback`.
    EncoderGradient { targets: Vec<Vec<f64>>, feedback: usize },
    /// Decoder matrix `D` trained by least mean squares on agent `input`'s signal.
    DecoderLms { targets: Vec<Vec<f64>>, input: usize },
}

/// Policy adaptation operator H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PolicyRule {
    Fixed,
    /// Recompute a `SoftmaxOfQ` policy from the Q table in theta and the belief.
    Softmax,
    /// Write `softmax(beta * E_b[r(s, a, xi)])` into the tabular bucket of the current belief.
    SmoothBestResponse { beta: f64 },
    /// `softmax(beta * (b v_event + (1 - b) v_other))` in every state, where `b` is a
    /// one-dimensional belief that some event occurs.
    OutcomeSoftmax {
        beta: f64,
        value_if_event: Vec<f64>,
        value_otherwise: Vec<f64>,
    },
}

/// Public signal an agent emits each tick (visible to others through observations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "emission", rename_all = "snake_case")]
pub enum Emission {
    #[default]
    None,
    BeliefMean,
    /// `n = E target(s) + noise * N(0, I)` with `E` from theta.
    Encode { targets: Vec<Vec<f64>>, noise: f64 },
    /// `u = D signal_source` with `D` from theta.
    Decode { source: usize },
}

impl Emission {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Emission::Encode { noise, .. } if *noise > 0.0)
    }
}

pub(crate) fn square_dim(len: usize) -> Option<usize> {
    let d = (len as f64).sqrt().round() as usize;
    (d * d == len).then_some(d)
}

impl AgentSpec {
    /// Checks that the operator kinds fit the game and the agent's state layout.
    pub fn check(&self, game: &TabularMarkovGame, index: usize, state: &MultilevelAgentState) -> Result<()> {
        let n_agents = game.num_agents();
        let n_states = game.num_states();
        let n_actions = game.num_actions(index);
        let n_opp = game.num_opponent_joint(index);
        self.periods.validate()?;
        state.validate()?;
        if state.policy.num_states() != n_states {
            return Err(MieError::usage(format!(
                "policy covers {} states, game has {n_states}",
                state.policy.num_states()
            )));
        }
        for row in state.policy.rows() {
            if row.len() != n_actions {
                return Err(MieError::usage(format!(
                    "policy rows have {} actions, agent has {n_actions}",
                    row.len()
                )));
            }
        }
        let agent_ref = |k: usize| -> Result<()> {
            if k >= n_agents {
                Err(MieError::usage(format!("agent reference {k} out of range")))
            } else {
                Ok(())
            }
        };
        let belief = &state.belief;
        match &self.belief_rule {
            BeliefRule::Static => {}
            BeliefRule::Bayes {
                likelihoods,
                nested_likelihoods,
            } => {
                let probs = belief
                    .probs()
                    .ok_or_else(|| MieError::usage("Bayes rule needs a categorical belief"))?;
                if likelihoods.len() != probs.len() || likelihoods.iter().any(|r| r.len() != n_opp) {
                    return Err(MieError::usage(
                        "Bayes likelihood table must be |hypotheses| x |opponent actions|",
                    ));
                }
                if belief.depth >= 2 {
                    let nested = belief.nested.as_ref().expect("validated");
                    let table = nested_likelihoods
                        .as_ref()
                        .ok_or_else(|| MieError::usage("depth-2 Bayes belief needs nested_likelihoods"))?;
                    let np = nested.values().len();
                    if table.len() != np || table.iter().any(|r| r.len() != n_actions) {
                        return Err(MieError::usage(
                            "nested likelihood table must be |nested hypotheses| x |own actions|",
                        ));
                    }
                }
            }
            BeliefRule::EmpiricalFrequency { rate } => {
                let probs = belief
                    .probs()
                    .ok_or_else(|| MieError::usage("empirical frequency needs a categorical belief"))?;
                if probs.len() != n_opp {
                    return Err(MieError::usage(format!(
                        "empirical-frequency belief has {} entries, opponents have {n_opp} joint actions",
                        probs.len()
                    )));
                }
                if let Some(nested) = &belief.nested {
                    if nested.values().len() != n_actions {
                        return Err(MieError::usage("nested frequency belief must cover own actions"));
                    }
                }
                if let BeliefRate::Constant { rate } = rate {
                    if !(0.0..=1.0).contains(rate) {
                        return Err(MieError::usage("constant belief rate must lie in [0, 1]"));
                    }
                }
            }
            BeliefRule::Track { source, gain } => {
                agent_ref(*source)?;
                if !gain.is_finite() {
                    return Err(MieError::usage("track gain must be finite"));
                }
                if !matches!(belief.dist, BeliefDist::Gaussian { .. }) {
                    return Err(MieError::usage("track rule needs a Gaussian belief"));
                }
            }
            BeliefRule::LinearModel { input, output, .. } => {
                agent_ref(*input)?;
                agent_ref(*output)?;
                if square_dim(belief.values().len()).is_none() {
                    return Err(MieError::usage("linear-model belief must hold a square matrix"));
                }
            }
            BeliefRule::BiasedOutcome {
                rate,
                rewarding_state,
                ..
            }
            | BeliefRule::GatedOutcome {
                rate,
                event_state: rewarding_state,
                ..
            } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(MieError::usage("outcome belief rate must lie in [0, 1]"));
                }
                if *rewarding_state >= n_states {
                    return Err(MieError::usage("outcome state out of range"));
                }
                if belief.values().len() != 1 {
                    return Err(MieError::usage("outcome belief must be one-dimensional"));
                }
            }
            BeliefRule::Linear { matrix } => {
                let d = belief.values().len();
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(MieError::usage("linear belief matrix must be d x d"));
                }
            }
        }
        match &self.neural_rule {
            NeuralRule::Static => {}
            NeuralRule::QLearning { discount } => {
                if state.theta.values.len() != n_states * n_actions {
                    return Err(MieError::usage("Q-learning theta must hold |S| x |A_i| values"));
                }
                if !(0.0..1.0).contains(discount) {
                    return Err(MieError::usage("Q-learning discount must lie in [0, 1)"));
                }
            }
            NeuralRule::EncoderGradient { targets, feedback } => {
                agent_ref(*feedback)?;
                check_targets(targets, n_states, square_dim(state.theta.values.len()))?;
            }
            NeuralRule::DecoderLms { targets, input } => {
                agent_ref(*input)?;
                check_targets(targets, n_states, square_dim(state.theta.values.len()))?;
            }
        }
        match &self.policy_rule {
            PolicyRule::Fixed => {}
            PolicyRule::Softmax => {
                let Policy::SoftmaxOfQ { belief_weight, .. } = &state.policy else {
                    return Err(MieError::usage("softmax rule needs a softmax_of_q policy"));
                };
                let len = state.theta.values.len();
                if len != 0 && len != n_states * n_actions {
                    return Err(MieError::usage("softmax rule needs theta to be empty or a Q table"));
                }
                if *belief_weight != 0.0 && belief.probs().map(|p| p.len()) != Some(n_opp) {
                    return Err(MieError::usage(
                        "belief-weighted payoff needs a categorical belief over opponent actions",
                    ));
                }
            }
            PolicyRule::SmoothBestResponse { beta } => {
                if !(beta.is_finite() && *beta > 0.0) {
                    return Err(MieError::usage("smooth best response beta must be finite and > 0"));
                }
                if !matches!(state.policy, Policy::Tabular { .. }) {
                    return Err(MieError::usage("smooth best response needs a tabular policy"));
                }
                if belief.probs().map(|p| p.len()) != Some(n_opp) {
                    return Err(MieError::usage(
                        "smooth best response needs a categorical belief over opponent actions",
                    ));
                }
            }
            PolicyRule::OutcomeSoftmax {
                beta,
                value_if_event,
                value_otherwise,
            } => {
                if !(beta.is_finite() && *beta > 0.0) {
                    return Err(MieError::usage("outcome softmax beta must be finite and > 0"));
                }
                if !matches!(state.policy, Policy::SoftmaxOfQ { .. }) {
                    return Err(MieError::usage("outcome softmax needs a softmax_of_q policy"));
                }
                if value_if_event.len() != n_actions || value_otherwise.len() != n_actions {
                    return Err(MieError::usage("outcome values must give one entry per action"));
                }
                if belief.values().len() != 1 {
                    return Err(MieError::usage("outcome softmax needs a one-dimensional belief"));
                }
            }
        }
        match &self.emission {
            Emission::None | Emission::BeliefMean => {}
            Emission::Encode { targets, noise } => {
                check_targets(targets, n_states, square_dim(state.theta.values.len()))?;
                if !(*noise >= 0.0) {
                    return Err(MieError::usage("emission noise must be non-negative"));
                }
            }
            Emission::Decode { source } => {
                agent_ref(*source)?;
                if *source >= index {
                    return Err(MieError::usage("decode source must be an earlier agent"));
                }
                if square_dim(state.theta.values.len()).is_none() {
                    return Err(MieError::usage("decoder theta must hold a square matrix"));
                }
            }
        }
        Ok(())
    }
}

fn check_targets(targets: &[Vec<f64>], n_states: usize, dim: Option<usize>) -> Result<()> {
    let dim = dim.ok_or_else(|| MieError::usage("theta must hold a square matrix"))?;
    if targets.len() != n_states || targets.iter().any(|t| t.len() != dim) {
        return Err(MieError::usage("targets must give one vector of the matrix dimension per state"));
    }
    Ok(())
}
