//! Two-player repeated matrix games with Q-learning or smooth fictitious-play agents.

use serde::{Deserialize, Serialize};

use crate::agent::{
    policy_refresh_h, AgentSpec, BeliefRate, BeliefRule, BeliefState, Emission, MultilevelAgentState,
    NeuralParams, NeuralRule, OperatorPeriods, Policy, PolicyRule,
};
use crate::error::{MieError, Result};
use crate::game::{repeated_game, TabularMarkovGame};
use crate::mdp::StatePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixGameName {
    MatchingPennies,
    PrisonersDilemma,
    Coordination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    #[default]
    QLearning,
    FictitiousPlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixGameConfig {
    pub game: MatrixGameName,
    #[serde(default)]
    pub learner: Learner,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Q-learning rate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Bootstrapping discount inside the Q update. Zero makes Q estimate the stage payoff,
    /// which is the right target in a one-state repeated game.
    #[serde(default)]
    pub q_discount: f64,
    /// Initial Q table per agent (`[agent][action]`); zeros when absent.
    #[serde(default)]
    pub initial_q: Option<Vec<Vec<f64>>>,
    /// Weight of the belief-expected stage payoff next to Q inside a Q-learner's softmax.
    /// Zero gives a plain Q-learner.
    #[serde(default = "default_belief_weight")]
    pub belief_weight: f64,
    #[serde(default = "default_rate")]
    pub belief_rate: BeliefRate,
    /// Initial opponent-frequency belief per agent; uniform when absent.
    #[serde(default)]
    pub initial_belief: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_bins")]
    pub belief_bins: usize,
}

fn default_beta() -> f64 {
    5.0
}
fn default_alpha() -> f64 {
    0.1
}
fn default_belief_weight() -> f64 {
    1.0
}
fn default_rate() -> BeliefRate {
    BeliefRate::Harmonic { prior_weight: 1.0 }
}
fn default_discount() -> f64 {
    0.95
}
fn default_bins() -> usize {
    101
}

impl MatrixGameConfig {
    pub fn new(game: MatrixGameName, learner: Learner, beta: f64, alpha: f64) -> Self {
        MatrixGameConfig {
            game,
            learner,
            beta,
            alpha,
            q_discount: 0.0,
            initial_q: None,
            belief_weight: default_belief_weight(),
            belief_rate: default_rate(),
            initial_belief: None,
            discount: default_discount(),
            belief_bins: default_bins(),
        }
    }
}

/// Per-agent payoffs indexed by joint action `a0 * 2 + a1`.
pub fn payoffs(name: MatrixGameName) -> Vec<Vec<f64>> {
    match name {
        // agent 0 matches, agent 1 mismatches; action 0 is Heads
        MatrixGameName::MatchingPennies => {
            vec![vec![1.0, -1.0, -1.0, 1.0], vec![-1.0, 1.0, 1.0, -1.0]]
        }
        // action 0 cooperates, 1 defects: T=5, R=3, P=1, S=0
        MatrixGameName::PrisonersDilemma => {
            vec![vec![3.0, 0.0, 5.0, 1.0], vec![3.0, 5.0, 0.0, 1.0]]
        }
        MatrixGameName::Coordination => vec![vec![2.0, 0.0, 0.0, 2.0], vec![2.0, 0.0, 0.0, 2.0]],
    }
}

/// Nash profiles used as references: `[agent][state][action]`.
pub fn nash_profiles(name: MatrixGameName) -> Vec<Vec<StatePolicy>> {
    let pure = |a: usize| {
        let mut r = vec![0.0; 2];
        r[a] = 1.0;
        vec![r]
    };
    match name {
        MatrixGameName::MatchingPennies => vec![vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]]],
        MatrixGameName::PrisonersDilemma => vec![vec![pure(1), pure(1)]],
        MatrixGameName::Coordination => vec![vec![pure(0), pure(0)], vec![pure(1), pure(1)]],
    }
}

impl MatrixGameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(MieError::usage("beta must be finite and > 0"));
        }
        if !self.belief_weight.is_finite() {
            return Err(MieError::usage("belief_weight must be finite"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MieError::usage("alpha must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(MieError::usage("discount must lie in [0, 1)"));
        }
        if let Some(q) = &self.initial_q {
            if q.len() != 2 || q.iter().any(|r| r.len() != 2) {
                return Err(MieError::usage("initial_q must be 2 x 2 ([agent][action])"));
            }
        }
        if let Some(b) = &self.initial_belief {
            if b.len() != 2 || b.iter().any(|r| r.len() != 2) {
                return Err(MieError::usage("initial_belief must be 2 x 2 ([agent][opponent action])"));
            }
        }
        Ok(())
    }

    pub(super) fn build(&self) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
        self.validate()?;
        let game = repeated_game(vec![2, 2], payoffs(self.game), self.discount)?;
        let mut specs = Vec::new();
        let mut states = Vec::new();
        for i in 0..2 {
            let belief = match &self.initial_belief {
                Some(b) => BeliefState::categorical(b[i].clone(), 1),
                None => BeliefState::uniform(2, 1),
            };
            let belief_rule = BeliefRule::EmpiricalFrequency {
                rate: self.belief_rate,
            };
            let (spec, state) = match self.learner {
                Learner::QLearning => {
                    let q = self
                        .initial_q
                        .as_ref()
                        .map_or(vec![0.0, 0.0], |q| q[i].clone());
                    (
                        AgentSpec {
                            name: format!("q{i}"),
                            belief_rule,
                            neural_rule: NeuralRule::QLearning {
                                discount: self.q_discount,
                            },
                            policy_rule: PolicyRule::Softmax,
                            emission: Emission::None,
                            periods: OperatorPeriods::default(),
                        },
                        MultilevelAgentState {
                            theta: NeuralParams::new(q, self.alpha),
                            belief,
                            policy: Policy::uniform_softmax(1, 2, self.beta, self.belief_weight),
                        },
                    )
                }
                Learner::FictitiousPlay => (
                    AgentSpec {
                        name: format!("fp{i}"),
                        belief_rule,
                        neural_rule: NeuralRule::Static,
                        policy_rule: PolicyRule::SmoothBestResponse { beta: self.beta },
                        emission: Emission::None,
                        periods: OperatorPeriods::default(),
                    },
                    MultilevelAgentState {
                        theta: NeuralParams::new(vec![], 0.0),
                        belief,
                        policy: Policy::tabular_constant(vec![vec![0.5, 0.5]], self.belief_bins, Some(2)),
                    },
                ),
            };
            // start from what H makes of the initial Q table and belief
            let mut state = state;
            state.policy = policy_refresh_h(&spec.policy_rule, &state.policy, &state.theta, &state.belief, &game, i)?;
            specs.push(spec);
            states.push(state);
        }
        Ok((game, specs, states))
    }
}
