//! Single-agent MDPs induced by fixing the other agents' policies, and exact solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;

/// Per-state action distributions, `policy[s][a]`.
pub type StatePolicy = Vec<Vec<f64>>;

pub const POLICY_ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// flat `[s][a][s']`
    pub transition: Vec<f64>,
    /// flat `[s][a]`
    pub reward: Vec<f64>,
    pub discount: f64,
}

impl Mdp {
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.transition[start..start + n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    fn q_value(&self, values: &[f64], s: usize, a: usize) -> f64 {
        let row = self.row(s, a);
        self.reward(s, a)
            + self.discount * row.iter().zip(values).map(|(p, v)| p * v).sum::<f64>()
    }

    fn greedy(&self, values: &[f64]) -> Vec<usize> {
        (0..self.num_states)
            .map(|s| {
                // lowest index wins ties
                let mut best = 0;
                let mut best_q = self.q_value(values, s, 0);
                for a in 1..self.num_actions {
                    let q = self.q_value(values, s, a);
                    if q > best_q + 1e-13 * best_q.abs().max(1.0) {
                        best = a;
                        best_q = q;
                    }
                }
                best
            })
            .collect()
    }

    /// Exact evaluation of a stochastic policy by solving `(I - gamma P_pi) V = r_pi`.
    pub fn evaluate(&self, policy: &StatePolicy) -> Result<Vec<f64>> {
        let n = self.num_states;
        check_policy(policy, n, self.num_actions)?;
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut r = DVector::<f64>::zeros(n);
        for s in 0..n {
            for (a, &p) in policy[s].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                r[s] += p * self.reward(s, a);
                for (next, &q) in self.row(s, a).iter().enumerate() {
                    m[(s, next)] -= self.discount * p * q;
                }
            }
        }
        let v = m
            .lu()
            .solve(&r)
            .ok_or_else(|| MieError::numerical("policy evaluation system is singular", None))?;
        Ok(v.iter().copied().collect())
    }

    pub fn evaluate_deterministic(&self, actions: &[usize]) -> Result<Vec<f64>> {
        let policy: StatePolicy = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; self.num_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        self.evaluate(&policy)
    }

    /// Optimal state values.
    ///
    /// Value iteration runs until the span of successive differences drops below
    /// `span_tol`; the greedy policy is then polished by exact policy iteration so
    /// the returned values are those of an optimal deterministic policy.
    pub fn solve(&self, span_tol: f64, max_iterations: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let n = self.num_states;
        let mut v = vec![0.0; n];
        let mut converged = false;
        for _ in 0..max_iterations {
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| self.q_value(&v, s, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let (lo, hi) = next
                .iter()
                .zip(&v)
                .map(|(a, b)| a - b)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                    (lo.min(d), hi.max(d))
                });
            v = next;
            if !(hi - lo).is_finite() {
                return Err(MieError::numerical("value iteration produced non-finite values", None));
            }
            if hi - lo < span_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(MieError::numerical(
                format!("value iteration did not reach span {span_tol:e} within {max_iterations} iterations"),
                None,
            ));
        }
        let mut actions = self.greedy(&v);
        for _ in 0..1000 {
            let values = self.evaluate_deterministic(&actions)?;
            let improved = self.greedy(&values);
            let better = improved.iter().zip(&actions).enumerate().any(|(s, (&b, &a))| {
                b != a && self.q_value(&values, s, b) > self.q_value(&values, s, a) + 1e-12
            });
            if !better {
                return Ok((values, actions));
            }
            actions = improved;
        }
        Err(MieError::numerical("policy iteration did not stabilise", None))
    }
}

pub fn check_policy(policy: &StatePolicy, states: usize, actions: usize) -> Result<()> {
    if policy.len() != states {
        return Err(MieError::usage(format!(
            "policy has {} state rows, expected {states}",
            policy.len()
        )));
    }
    for (s, row) in policy.iter().enumerate() {
        if row.len() != actions {
            return Err(MieError::usage(format!(
                "policy row {s} has {} entries, expected {actions}",
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > POLICY_ROW_TOL {
            return Err(MieError::usage(format!(
                "policy row {s} is not a distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Fixes every agent except `agent` to its policy in `joint_policy` and marginalises
/// them out of the transition tensor and agent `agent`'s reward.
///
/// `joint_policy[agent]` is ignored.
pub fn single_agent_mdp(
    game: &TabularMarkovGame,
    agent: usize,
    joint_policy: &[StatePolicy],
) -> Result<Mdp> {
    let n_agents = game.num_agents();
    if agent >= n_agents {
        return Err(MieError::usage(format!("agent {agent} out of range")));
    }
    if joint_policy.len() != n_agents {
        return Err(MieError::usage(format!(
            "expected {n_agents} policies, got {}",
            joint_policy.len()
        )));
    }
    for (j, pol) in joint_policy.iter().enumerate() {
        if j != agent {
            check_policy(pol, game.num_states(), game.num_actions(j))
                .map_err(|e| e.for_agent(j))?;
        }
    }
    let n = game.num_states();
    let na = game.num_actions(agent);
    let n_opp = game.num_opponent_joint(agent);
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na];
    for s in 0..n {
        for o in 0..n_opp {
            let probe = game.compose_joint(agent, 0, o);
            let weight: f64 = probe
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != agent)
                .map(|(k, &a)| joint_policy[k][s][a])
                .product();
            if weight == 0.0 {
                continue;
            }
            for a in 0..na {
                let joint = game.compose_joint(agent, a, o);
                let j = game.joint_index(&joint);
                reward[s * na + a] += weight * game.reward(agent, s, j);
                let base = (s * na + a) * n;
                for (next, &p) in game.transition_row(s, j).iter().enumerate() {
                    transition[base + next] += weight * p;
                }
            }
        }
    }
    Ok(Mdp {
        num_states: n,
        num_actions: na,
        transition,
        reward,
        discount: game.discount(),
    })
}
