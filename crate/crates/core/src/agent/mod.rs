//! Three-level agent state `(theta, b, pi)` and the coupled update operators.

mod ops;
mod rules;
mod step;

pub use ops::{
    act, bayes_update, belief_bucket, belief_update_f, neural_update_g, num_buckets,
    policy_refresh_h, softmax, td_signal,
};
pub(crate) use ops::neural_signal;
pub use rules::{AgentSpec, BeliefRate, BeliefRule, Emission, NeuralRule, OperatorPeriods, PolicyRule};
pub use step::{
    build_observations, emit_signals, joint_step_phi, sample_joint_action, update_agents,
    ObservationMask, StepRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::mdp::StatePolicy;

const SIMPLEX_TOL: f64 = 1e-12;

/// Neural level: parameter vector and its learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralParams {
    pub values: Vec<f64>,
    pub learning_rate: f64,
}

impl NeuralParams {
    pub fn new(values: Vec<f64>, learning_rate: f64) -> Self {
        NeuralParams {
            values,
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(MieError::numerical("non-finite neural parameter", Some(i)));
        }
        // A zero rate is accepted: it freezes the level.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(MieError::usage(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BeliefDist {
    /// Probability vector over latent hypotheses (opponent types or opponent actions).
    Categorical { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// Cognitive level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub dist: BeliefDist,
    /// Level-k nesting depth: 0 no opponent model, 1 beliefs about the opponent,
    /// 2 adds a nested model of the opponent's belief about this agent.
    pub depth: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested: Option<Box<BeliefState>>,
    /// Number of evidence updates absorbed; drives harmonic learning rates.
    #[serde(default)]
    pub updates: u64,
}

pub const MAX_BELIEF_DEPTH: u8 = 2;

impl BeliefState {
    pub fn categorical(probs: Vec<f64>, depth: u8) -> Self {
        BeliefState {
            dist: BeliefDist::Categorical { probs },
            depth,
            nested: None,
            updates: 0,
        }
    }

    pub fn uniform(n: usize, depth: u8) -> Self {
        Self::categorical(vec![1.0 / n as f64; n], depth)
    }

    /// Gaussian belief with zero covariance (a point estimate).
    pub fn point(mean: Vec<f64>) -> Self {
        let d = mean.len();
        BeliefState {
            dist: BeliefDist::Gaussian {
                mean,
                cov: vec![vec![0.0; d]; d],
            },
            depth: 0,
            nested: None,
            updates: 0,
        }
    }

    pub fn with_nested(mut self, nested: BeliefState) -> Self {
        self.nested = Some(Box::new(nested));
        self
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match &self.dist {
            BeliefDist::Categorical { probs } => Some(probs),
            BeliefDist::Gaussian { .. } => None,
        }
    }

    /// Categorical probabilities or Gaussian mean.
    pub fn values(&self) -> &[f64] {
        match &self.dist {
            BeliefDist::Categorical { probs } => probs,
            BeliefDist::Gaussian { mean, .. } => mean,
        }
    }

    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        match &mut self.dist {
            BeliefDist::Categorical { probs } => probs,
            BeliefDist::Gaussian { mean, .. } => mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth > MAX_BELIEF_DEPTH {
            return Err(MieError::usage(format!(
                "belief depth {} exceeds the supported maximum {MAX_BELIEF_DEPTH}",
                self.depth
            )));
        }
        if (self.depth >= 2) != self.nested.is_some() {
            return Err(MieError::usage(
                "nested belief must be present exactly when depth >= 2",
            ));
        }
        match &self.dist {
            BeliefDist::Categorical { probs } => check_simplex(probs)?,
            BeliefDist::Gaussian { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(MieError::usage("covariance shape does not match mean"));
                }
                if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
                    return Err(MieError::numerical("non-finite belief mean", Some(i)));
                }
                for a in 0..d {
                    for b in 0..a {
                        if (cov[a][b] - cov[b][a]).abs() > 1e-9 * (1.0 + cov[a][b].abs()) {
                            return Err(MieError::usage("covariance is not symmetric"));
                        }
                    }
                    if !(cov[a][a] >= 0.0) {
                        return Err(MieError::usage("covariance has a negative variance"));
                    }
                }
            }
        }
        if let Some(n) = &self.nested {
            n.validate()?;
        }
        Ok(())
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(MieError::usage(format!(
            "not a probability vector (sum {sum}): {p:?}"
        )));
    }
    Ok(())
}

/// Behavioral level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// `table[s][bucket][a]`, where the bucket is the quantised categorical belief.
    Tabular { bins: usize, table: Vec<Vec<Vec<f64>>> },
    /// `probs[s][a]` proportional to `exp(beta * (Q(s,a) + belief_weight * E_b[r(s,a,xi)]))`.
    SoftmaxOfQ {
        beta: f64,
        #[serde(default)]
        belief_weight: f64,
        probs: Vec<Vec<f64>>,
    },
}

impl Policy {
    /// A tabular policy that plays `per_state[s]` regardless of belief.
    pub fn tabular_constant(per_state: StatePolicy, bins: usize, belief_dim: Option<usize>) -> Self {
        let buckets = belief_dim.map_or(1, |d| num_buckets(d, bins));
        Policy::Tabular {
            bins,
            table: per_state
                .into_iter()
                .map(|row| vec![row; buckets])
                .collect(),
        }
    }

    pub fn uniform_softmax(states: usize, actions: usize, beta: f64, belief_weight: f64) -> Self {
        Policy::SoftmaxOfQ {
            beta,
            belief_weight,
            probs: vec![vec![1.0 / actions as f64; actions]; states],
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Policy::Tabular { table, .. } => table.len(),
            Policy::SoftmaxOfQ { probs, .. } => probs.len(),
        }
    }

    /// Action distribution in state `s` given the current belief.
    pub fn distribution(&self, s: usize, belief: &BeliefState) -> &[f64] {
        match self {
            Policy::Tabular { bins, table } => {
                let row = &table[s];
                let bucket = if row.len() == 1 {
                    0
                } else {
                    belief.probs().map_or(0, |p| belief_bucket(p, *bins))
                };
                &row[bucket]
            }
            Policy::SoftmaxOfQ { probs, .. } => &probs[s],
        }
    }

    /// Per-state distributions with the belief held fixed.
    pub fn state_policy(&self, belief: &BeliefState) -> StatePolicy {
        (0..self.num_states())
            .map(|s| self.distribution(s, belief).to_vec())
            .collect()
    }

    /// Every stored distribution in a fixed order (states, then buckets).
    pub fn rows(&self) -> Vec<&[f64]> {
        match self {
            Policy::Tabular { table, .. } => table
                .iter()
                .flat_map(|buckets| buckets.iter().map(|r| r.as_slice()))
                .collect(),
            Policy::SoftmaxOfQ { probs, .. } => probs.iter().map(|r| r.as_slice()).collect(),
        }
    }

    pub fn rows_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Policy::Tabular { table, .. } => {
                table.iter_mut().flat_map(|buckets| buckets.iter_mut()).collect()
            }
            Policy::SoftmaxOfQ { probs, .. } => probs.iter_mut().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Policy::SoftmaxOfQ { beta, belief_weight, .. } = self {
            if !(beta.is_finite() && *beta > 0.0) {
                return Err(MieError::usage(format!("beta must be finite and > 0, got {beta}")));
            }
            if !belief_weight.is_finite() {
                return Err(MieError::usage("belief_weight must be finite"));
            }
        }
        if let Policy::Tabular { bins, .. } = self {
            if *bins == 0 {
                return Err(MieError::usage("tabular policy needs at least one bin"));
            }
        }
        for row in self.rows() {
            check_simplex(row)?;
        }
        Ok(())
    }
}

/// The tuple `x^i = (theta, b, pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelAgentState {
    pub theta: NeuralParams,
    pub belief: BeliefState,
    pub policy: Policy,
}

impl MultilevelAgentState {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.belief.validate()?;
        self.policy.validate()
    }
}

/// What an agent observed after one environment transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: usize,
    pub next_state: usize,
    pub own_action: usize,
    pub reward: f64,
    /// Opponents' joint sub-profile index; `None` when masked.
    pub opponent_actions: Option<usize>,
    /// Signals emitted this tick, indexed by agent; `None` when masked.
    pub signals: Option<Vec<Vec<f64>>>,
    /// Environment state offered as belief evidence; `None` when masked.
    pub outcome: Option<usize>,
}

impl Observation {
    pub fn is_masked(&self) -> bool {
        self.opponent_actions.is_none() && self.signals.is_none() && self.outcome.is_none()
    }
}

/// Learning signal `delta` applied along a parameter direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningSignal {
    pub delta: f64,
    pub target: SignalTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalTarget {
    /// A single parameter (tabular Q entry).
    Index(usize),
    /// A full-length direction vector (gradient estimate).
    Direction(Vec<f64>),
}
