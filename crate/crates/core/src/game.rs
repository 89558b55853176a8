//! Finite-state, finite-action N-agent stochastic games.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::rng::sample_index;

/// Dense storage guard on `|S| * prod |A_i|`.
pub const MAX_TENSOR_ENTRIES: usize = 10_000_000;

const SUM_TOL: f64 = 1e-12;

/// Serialized game definition.
///
/// `transition[s][j][s']` and `rewards[i][s][j]` are indexed by the joint action
/// index `j`, row-major over agents with the last agent varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub states: usize,
    pub actions_per_agent: Vec<usize>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<Vec<f64>>>,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub initial_dist: Vec<f64>,
}

fn default_discount() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    Shape { message: String },
    TooLarge { entries: usize },
    RowSum { state: usize, joint: Vec<usize>, sum: f64 },
    Negative { state: usize, joint: Vec<usize>, next: usize, value: f64 },
    NonFiniteProbability { state: usize, joint: Vec<usize>, next: usize },
    NonFiniteReward { agent: usize, state: usize, joint: Vec<usize> },
    InitialDistSum { sum: f64 },
    InitialDistNegative { state: usize, value: f64 },
    Discount { value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { message } => write!(f, "shape: {message}"),
            Violation::TooLarge { entries } => write!(
                f,
                "|S|*prod|A_i| = {entries} exceeds the dense limit {MAX_TENSOR_ENTRIES}"
            ),
            Violation::RowSum { state, joint, sum } => {
                write!(f, "transition row (s={state}, a={joint:?}) sums to {sum}")
            }
            Violation::Negative {
                state,
                joint,
                next,
                value,
            } => write!(
                f,
                "negative probability {value} at (s={state}, a={joint:?}, s'={next})"
            ),
            Violation::NonFiniteProbability { state, joint, next } => write!(
                f,
                "non-finite probability at (s={state}, a={joint:?}, s'={next})"
            ),
            Violation::NonFiniteReward {
                agent,
                state,
                joint,
            } => write!(f, "non-finite reward for agent {agent} at (s={state}, a={joint:?})"),
            Violation::InitialDistSum { sum } => write!(f, "initial_dist sums to {sum}"),
            Violation::InitialDistNegative { state, value } => {
                write!(f, "initial_dist[{state}] = {value} is negative")
            }
            Violation::Discount { value } => write!(f, "discount {value} outside [0, 1)"),
        }
    }
}

/// Joint action: one action index per agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub Vec<usize>);

/// Checks every invariant of a game definition and lists the violations.
pub fn validate_game(spec: &GameSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let n_states = spec.states;
    let n_agents = spec.actions_per_agent.len();
    if n_states == 0 {
        out.push(Violation::Shape {
            message: "game must have at least one state".into(),
        });
    }
    if n_agents == 0 {
        out.push(Violation::Shape {
            message: "game must have at least one agent".into(),
        });
    }
    if spec.actions_per_agent.contains(&0) {
        out.push(Violation::Shape {
            message: "every agent needs at least one action".into(),
        });
    }
    if !out.is_empty() {
        return out;
    }
    let n_joint = spec
        .actions_per_agent
        .iter()
        .try_fold(1usize, |acc, &a| acc.checked_mul(a));
    let entries = n_joint.and_then(|j| j.checked_mul(n_states));
    let n_joint = match (n_joint, entries) {
        (Some(j), Some(e)) if e <= MAX_TENSOR_ENTRIES => j,
        (_, e) => {
            out.push(Violation::TooLarge {
                entries: e.unwrap_or(usize::MAX),
            });
            return out;
        }
    };
    if !(0.0..1.0).contains(&spec.discount) {
        out.push(Violation::Discount {
            value: spec.discount,
        });
    }
    if spec.transition.len() != n_states {
        out.push(Violation::Shape {
            message: format!(
                "transition has {} state rows, expected {n_states}",
                spec.transition.len()
            ),
        });
    }
    if spec.rewards.len() != n_agents {
        out.push(Violation::Shape {
            message: format!(
                "rewards has {} agent tables, expected {n_agents}",
                spec.rewards.len()
            ),
        });
    }
    if spec.initial_dist.len() != n_states {
        out.push(Violation::Shape {
            message: format!(
                "initial_dist has {} entries, expected {n_states}",
                spec.initial_dist.len()
            ),
        });
    }
    if !out.is_empty() {
        return out;
    }
    let strides = strides(&spec.actions_per_agent);
    for (s, rows) in spec.transition.iter().enumerate() {
        if rows.len() != n_joint {
            out.push(Violation::Shape {
                message: format!("transition[{s}] has {} joint rows, expected {n_joint}", rows.len()),
            });
            continue;
        }
        for (j, row) in rows.iter().enumerate() {
            let joint = decode_joint(&strides, &spec.actions_per_agent, j);
            if row.len() != n_states {
                out.push(Violation::Shape {
                    message: format!(
                        "transition[{s}][{j}] has {} entries, expected {n_states}",
                        row.len()
                    ),
                });
                continue;
            }
            let mut sum = 0.0;
            for (next, &p) in row.iter().enumerate() {
                if !p.is_finite() {
                    out.push(Violation::NonFiniteProbability {
                        state: s,
                        joint: joint.clone(),
                        next,
                    });
                } else if p < 0.0 {
                    out.push(Violation::Negative {
                        state: s,
                        joint: joint.clone(),
                        next,
                        value: p,
                    });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= SUM_TOL) {
                out.push(Violation::RowSum {
                    state: s,
                    joint,
                    sum,
                });
            }
        }
    }
    for (i, table) in spec.rewards.iter().enumerate() {
        if table.len() != n_states {
            out.push(Violation::Shape {
                message: format!("rewards[{i}] has {} states, expected {n_states}", table.len()),
            });
            continue;
        }
        for (s, row) in table.iter().enumerate() {
            if row.len() != n_joint {
                out.push(Violation::Shape {
                    message: format!(
                        "rewards[{i}][{s}] has {} entries, expected {n_joint}",
                        row.len()
                    ),
                });
                continue;
            }
            for (j, r) in row.iter().enumerate() {
                if !r.is_finite() {
                    out.push(Violation::NonFiniteReward {
                        agent: i,
                        state: s,
                        joint: decode_joint(&strides, &spec.actions_per_agent, j),
                    });
                }
            }
        }
    }
    let mut sum = 0.0;
    for (s, &p) in spec.initial_dist.iter().enumerate() {
        if !(p >= 0.0) {
            out.push(Violation::InitialDistNegative { state: s, value: p });
        }
        sum += p;
    }
    if !((sum - 1.0).abs() <= SUM_TOL) {
        out.push(Violation::InitialDistSum { sum });
    }
    out
}

fn strides(actions: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; actions.len()];
    for k in (0..actions.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * actions[k + 1];
    }
    strides
}

fn decode_joint(strides: &[usize], actions: &[usize], mut j: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(actions.len());
    for &st in strides {
        out.push(j / st);
        j %= st;
    }
    out
}

/// A validated, immutable tabular Markov game.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMarkovGame {
    spec: GameSpec,
    num_joint: usize,
    strides: Vec<usize>,
    // flat [s][j][s']
    transition: Vec<f64>,
    // per agent, flat [s][j]
    rewards: Vec<Vec<f64>>,
}

impl TabularMarkovGame {
    pub fn new(spec: GameSpec) -> Result<Self> {
        let violations = validate_game(&spec);
        if !violations.is_empty() {
            return Err(MieError::InvalidGame(violations));
        }
        let strides = strides(&spec.actions_per_agent);
        let num_joint = spec.actions_per_agent.iter().product();
        let transition = spec
            .transition
            .iter()
            .flat_map(|rows| rows.iter().flat_map(|r| r.iter().copied()))
            .collect();
        let rewards = spec
            .rewards
            .iter()
            .map(|t| t.iter().flat_map(|r| r.iter().copied()).collect())
            .collect();
        Ok(TabularMarkovGame {
            spec,
            num_joint,
            strides,
            transition,
            rewards,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GameSpec = serde_json::from_str(text)?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    pub fn num_agents(&self) -> usize {
        self.spec.actions_per_agent.len()
    }

    pub fn num_states(&self) -> usize {
        self.spec.states
    }

    pub fn num_actions(&self, agent: usize) -> usize {
        self.spec.actions_per_agent[agent]
    }

    pub fn actions_per_agent(&self) -> &[usize] {
        &self.spec.actions_per_agent
    }

    pub fn num_joint(&self) -> usize {
        self.num_joint
    }

    pub fn discount(&self) -> f64 {
        self.spec.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.spec.initial_dist
    }

    pub fn joint_index(&self, joint: &[usize]) -> usize {
        joint.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    pub fn decode_joint(&self, j: usize) -> Vec<usize> {
        decode_joint(&self.strides, &self.spec.actions_per_agent, j)
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states() {
            return Err(MieError::usage(format!(
                "state {s} out of range (|S| = {})",
                self.num_states()
            )));
        }
        Ok(())
    }

    pub fn check_joint(&self, joint: &[usize]) -> Result<()> {
        if joint.len() != self.num_agents() {
            return Err(MieError::usage(format!(
                "joint action has {} entries, game has {} agents",
                joint.len(),
                self.num_agents()
            )));
        }
        for (i, (&a, &n)) in joint.iter().zip(&self.spec.actions_per_agent).enumerate() {
            if a >= n {
                return Err(MieError::usage(format!(
                    "action {a} of agent {i} out of range (|A_{i}| = {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn transition_row(&self, s: usize, j: usize) -> &[f64] {
        let n = self.num_states();
        let start = (s * self.num_joint + j) * n;
        &self.transition[start..start + n]
    }

    pub fn reward(&self, agent: usize, s: usize, j: usize) -> f64 {
        self.rewards[agent][s * self.num_joint + j]
    }

    pub fn rewards_at(&self, s: usize, j: usize) -> Vec<f64> {
        (0..self.num_agents()).map(|i| self.reward(i, s, j)).collect()
    }

    /// Number of joint actions of all agents other than `agent`.
    pub fn num_opponent_joint(&self, agent: usize) -> usize {
        self.num_joint / self.num_actions(agent)
    }

    /// Index of the opponents' sub-profile, row-major over the remaining agents.
    pub fn opponent_index(&self, agent: usize, joint: &[usize]) -> usize {
        let mut idx = 0;
        for (k, &a) in joint.iter().enumerate() {
            if k != agent {
                idx = idx * self.num_actions(k) + a;
            }
        }
        idx
    }

    /// Rebuilds a full joint action from an own action and an opponent sub-profile index.
    pub fn compose_joint(&self, agent: usize, own: usize, mut opp_index: usize) -> Vec<usize> {
        let n = self.num_agents();
        let mut joint = vec![0; n];
        for k in (0..n).rev() {
            if k == agent {
                joint[k] = own;
            } else {
                let m = self.num_actions(k);
                joint[k] = opp_index % m;
                opp_index /= m;
            }
        }
        joint
    }

    /// A state is absorbing when every joint action keeps it in place with probability one.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.num_joint).all(|j| self.transition_row(s, j)[s] >= 1.0 - SUM_TOL)
    }

    /// Returns a copy with `reward[agent]` replaced by `f(old)` entrywise (flat `[s][j]` order).
    pub fn map_rewards(&self, agent: usize, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        if agent >= self.num_agents() {
            return Err(MieError::usage(format!("agent {agent} out of range")));
        }
        let mut spec = self.spec.clone();
        let nj = self.num_joint;
        for (s, row) in spec.rewards[agent].iter_mut().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = f(s * nj + j, *r);
            }
        }
        Self::new(spec)
    }

    /// Samples a successor and returns it with the reward vector `r_i(s, a)`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: usize,
        joint: &JointAction,
        rng: &mut R,
    ) -> Result<(usize, Vec<f64>)> {
        self.check_state(s)?;
        self.check_joint(&joint.0)?;
        let j = self.joint_index(&joint.0);
        let u: f64 = rng.random();
        let next = sample_index(self.transition_row(s, j), u);
        Ok((next, self.rewards_at(s, j)))
    }
}

impl TryFrom<GameSpec> for TabularMarkovGame {
    type Error = MieError;
    fn try_from(spec: GameSpec) -> Result<Self> {
        Self::new(spec)
    }
}

/// Builds a single-state repeated game from per-agent payoff tensors indexed by joint action.
pub fn repeated_game(actions: Vec<usize>, payoffs: Vec<Vec<f64>>, discount: f64) -> Result<TabularMarkovGame> {
    let num_joint: usize = actions.iter().product();
    TabularMarkovGame::new(GameSpec {
        states: 1,
        actions_per_agent: actions,
        transition: vec![vec![vec![1.0]; num_joint]],
        rewards: payoffs.into_iter().map(|p| vec![p]).collect(),
        discount,
        initial_dist: vec![1.0],
    })
}
