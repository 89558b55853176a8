//! Single-agent two-armed bandits whose belief dynamics lock in a low-reward policy.
//!
//! Depression: the environment offers reward on each tick with probability `p_true`;
//! the belief that reward is available is updated with a pessimistic bias every tick,
//! and the agent engages only when that belief is high enough.
//!
//! Anxiety: each tick is a threat with probability `p_true`; the threat belief moves
//! only on ticks where the agent approaches, so avoidance starves it of evidence.

use serde::{Deserialize, Serialize};

use crate::agent::{
    softmax, AgentSpec, BeliefRule, BeliefState, Emission, MultilevelAgentState, NeuralParams,
    NeuralRule, OperatorPeriods, Policy, PolicyRule,
};
use crate::error::{MieError, Result};
use crate::game::{GameSpec, TabularMarkovGame};

/// Action 0 in both variants (engage / approach).
pub const ENGAGE: usize = 0;
/// Action 1 in both variants (withdraw / avoid).
pub const WITHDRAW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Depression,
    Anxiety,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnxietyPolicy {
    /// Always avoid, regardless of belief.
    #[default]
    PureAvoidance,
    /// Softmax over belief-weighted action values.
    BeliefSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologicalConfig {
    pub variant: Variant,
    /// Reward probability (depression) or threat probability (anxiety).
    #[serde(default)]
    pub p_true: Option<f64>,
    /// Pessimistic bias subtracted from each outcome (depression only).
    #[serde(default = "default_bias")]
    pub bias: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub initial_belief: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Cost of engaging when nothing is on offer (depression).
    #[serde(default = "default_effort")]
    pub effort_cost: f64,
    /// Loss from approaching under threat (anxiety).
    #[serde(default = "default_penalty")]
    pub threat_penalty: f64,
    #[serde(default)]
    pub anxiety_policy: AnxietyPolicy,
}

fn default_bias() -> f64 {
    0.5
}
fn default_rate() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    5.0
}
fn default_effort() -> f64 {
    0.5
}
fn default_penalty() -> f64 {
    2.0
}

impl PathologicalConfig {
    pub fn new(variant: Variant) -> Self {
        PathologicalConfig {
            variant,
            p_true: None,
            bias: default_bias(),
            rate: default_rate(),
            initial_belief: None,
            beta: default_beta(),
            effort_cost: default_effort(),
            threat_penalty: default_penalty(),
            anxiety_policy: AnxietyPolicy::default(),
        }
    }

    pub fn p(&self) -> f64 {
        self.p_true.unwrap_or(match self.variant {
            Variant::Depression => 0.8,
            Variant::Anxiety => 0.2,
        })
    }

    pub fn b0(&self) -> f64 {
        self.initial_belief.unwrap_or(match self.variant {
            Variant::Depression => 0.5,
            Variant::Anxiety => 0.9,
        })
    }

    /// Mean-field fixed point of the biased depression update, `max(p - bias, 0)`.
    pub fn depression_fixed_point(&self) -> f64 {
        (self.p() - self.bias).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_true", self.p()), ("rate", self.rate), ("initial_belief", self.b0())] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MieError::usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(MieError::usage("beta must be finite and > 0"));
        }
        if !self.bias.is_finite() {
            return Err(MieError::usage("bias must be finite"));
        }
        Ok(())
    }

    pub(super) fn build(&self) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
        self.validate()?;
        let p = self.p();
        // state 0 is the event (reward on offer / threat present), drawn afresh each tick
        let row = vec![p, 1.0 - p];
        let (event_reward, other_reward) = match self.variant {
            Variant::Depression => (1.0, -self.effort_cost),
            Variant::Anxiety => (-self.threat_penalty, 1.0),
        };
        let game = TabularMarkovGame::new(GameSpec {
            states: 2,
            actions_per_agent: vec![2],
            transition: vec![vec![row.clone(); 2]; 2],
            rewards: vec![vec![vec![event_reward, 0.0], vec![other_reward, 0.0]]],
            discount: 0.95,
            initial_dist: row,
        })?;
        let belief_rule = match self.variant {
            Variant::Depression => BeliefRule::BiasedOutcome {
                rate: self.rate,
                bias: self.bias,
                rewarding_state: 0,
            },
            Variant::Anxiety => BeliefRule::GatedOutcome {
                rate: self.rate,
                gate_action: ENGAGE,
                event_state: 0,
            },
        };
        let value_rule = PolicyRule::OutcomeSoftmax {
            beta: self.beta,
            value_if_event: vec![event_reward, 0.0],
            value_otherwise: vec![other_reward, 0.0],
        };
        let b0 = self.b0();
        let belief_policy = || {
            let v = [b0 * event_reward + (1.0 - b0) * other_reward, 0.0];
            Policy::SoftmaxOfQ {
                beta: self.beta,
                belief_weight: 0.0,
                probs: vec![softmax(&v, self.beta); 2],
            }
        };
        let (policy_rule, policy) = match (self.variant, self.anxiety_policy) {
            (Variant::Anxiety, AnxietyPolicy::PureAvoidance) => (
                PolicyRule::Fixed,
                Policy::tabular_constant(vec![vec![0.0, 1.0]; 2], 11, None),
            ),
            _ => (value_rule, belief_policy()),
        };
        let spec = AgentSpec {
            name: match self.variant {
                Variant::Depression => "depression".into(),
                Variant::Anxiety => "anxiety".into(),
            },
            belief_rule,
            neural_rule: NeuralRule::Static,
            policy_rule,
            emission: Emission::None,
            periods: OperatorPeriods::default(),
        };
        Ok((
            game,
            vec![spec],
            vec![MultilevelAgentState {
                theta: NeuralParams::new(vec![], 0.0),
                belief: BeliefState::point(vec![b0]),
                policy,
            }],
        ))
    }
}
