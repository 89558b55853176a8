//! Lane merge between a human driver (agent 0) and an autonomous vehicle (agent 1).
//!
//! States are `(distance to the merge point, longitudinal gap)` plus two absorbing
//! outcomes. The gap is human position minus AV position, clamped to `[-D, D]`.

use serde::{Deserialize, Serialize};

use crate::agent::{
    softmax, AgentSpec, BeliefRate, BeliefRule, BeliefState, Emission, MultilevelAgentState,
    NeuralParams, NeuralRule, OperatorPeriods, Policy, PolicyRule,
};
use crate::error::{MieError, Result};
use crate::game::{GameSpec, TabularMarkovGame};

pub const YIELD: usize = 0;
pub const HOLD: usize = 1;
pub const ACCELERATE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighwayConfig {
    #[serde(default = "default_lanes")]
    pub positions: usize,
    #[serde(default = "default_gap")]
    pub max_gap: i64,
    #[serde(default = "default_safe")]
    pub safe_gap: i64,
    /// Probability that the gap drifts by one extra cell (split evenly up/down).
    #[serde(default)]
    pub slip: f64,
    #[serde(default = "default_merge")]
    pub merge_reward: f64,
    #[serde(default = "default_collision")]
    pub collision_penalty: f64,
    #[serde(default = "default_time")]
    pub time_cost: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Human likelihood of each AV action under the two AV types (yielding, assertive).
    #[serde(default = "default_types")]
    pub av_type_likelihoods: Vec<Vec<f64>>,
}

fn default_lanes() -> usize {
    4
}
fn default_gap() -> i64 {
    3
}
fn default_safe() -> i64 {
    2
}
fn default_merge() -> f64 {
    1.0
}
fn default_collision() -> f64 {
    -10.0
}
fn default_time() -> f64 {
    0.01
}
fn default_discount() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    5.0
}
fn default_types() -> Vec<Vec<f64>> {
    vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]
}

impl Default for HighwayConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl HighwayConfig {
    pub fn num_gaps(&self) -> usize {
        (2 * self.max_gap + 1) as usize
    }

    pub fn state_index(&self, position: usize, gap: i64) -> usize {
        (position - 1) * self.num_gaps() + (gap + self.max_gap) as usize
    }

    pub fn merged_state(&self) -> usize {
        self.positions * self.num_gaps()
    }

    pub fn collided_state(&self) -> usize {
        self.merged_state() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions == 0 || self.max_gap < 1 || self.safe_gap < 1 {
            return Err(MieError::usage("positions, max_gap and safe_gap must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(MieError::usage("slip must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(MieError::usage("discount must lie in [0, 1)"));
        }
        if self.av_type_likelihoods.is_empty() || self.av_type_likelihoods.iter().any(|r| r.len() != 3) {
            return Err(MieError::usage("av_type_likelihoods rows need one entry per AV action"));
        }
        Ok(())
    }

    pub fn game(&self) -> Result<TabularMarkovGame> {
        self.validate()?;
        let n_live = self.merged_state();
        let n = n_live + 2;
        let (merged, collided) = (self.merged_state(), self.collided_state());
        let d = self.max_gap;
        let mut transition = vec![vec![vec![0.0; n]; 9]; n];
        let mut rewards = vec![vec![vec![0.0; 9]; n]; 2];
        for pos in 1..=self.positions {
            for gap in -d..=d {
                let s = self.state_index(pos, gap);
                for ah in 0..3 {
                    for aa in 0..3 {
                        let j = ah * 3 + aa;
                        let base = (gap + ah as i64 - aa as i64).clamp(-d, d);
                        let mut outcomes = vec![(base, 1.0 - self.slip)];
                        if self.slip > 0.0 {
                            outcomes.push(((base - 1).max(-d), self.slip / 2.0));
                            outcomes.push(((base + 1).min(d), self.slip / 2.0));
                        }
                        let mut expected = -self.time_cost;
                        for (g, p) in outcomes {
                            let next = if pos == 1 {
                                if g.abs() >= self.safe_gap {
                                    expected += p * self.merge_reward;
                                    merged
                                } else {
                                    expected += p * self.collision_penalty;
                                    collided
                                }
                            } else {
                                self.state_index(pos - 1, g)
                            };
                            transition[s][j][next] += p;
                        }
                        // outcome rewards enter in expectation so they stay a function of (s, a)
                        rewards[0][s][j] = expected;
                        rewards[1][s][j] = expected;
                    }
                }
            }
        }
        for s in [merged, collided] {
            for row in transition[s].iter_mut() {
                row[s] = 1.0;
            }
        }
        let mut initial = vec![0.0; n];
        initial[self.state_index(self.positions, 0)] = 1.0;
        TabularMarkovGame::new(GameSpec {
            states: n,
            actions_per_agent: vec![3, 3],
            transition,
            rewards,
            discount: self.discount,
            initial_dist: initial,
        })
    }

    pub(super) fn build(&self) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
        let game = self.game()?;
        let n = game.num_states();
        let q0 = vec![0.0; n * 3];
        let probs = vec![softmax(&[0.0; 3], self.beta); n];
        let types = self.av_type_likelihoods.len();
        let human = AgentSpec {
            name: "human".into(),
            belief_rule: BeliefRule::Bayes {
                likelihoods: self.av_type_likelihoods.clone(),
                nested_likelihoods: None,
            },
            neural_rule: NeuralRule::QLearning {
                discount: self.discount,
            },
            policy_rule: PolicyRule::Softmax,
            emission: Emission::None,
            periods: OperatorPeriods::default(),
        };
        let av = AgentSpec {
            name: "av".into(),
            belief_rule: BeliefRule::EmpiricalFrequency {
                rate: BeliefRate::Harmonic { prior_weight: 1.0 },
            },
            ..human.clone()
        };
        let state = |belief| MultilevelAgentState {
            theta: NeuralParams::new(q0.clone(), self.alpha),
            belief,
            policy: Policy::SoftmaxOfQ {
                beta: self.beta,
                belief_weight: 0.0,
                probs: probs.clone(),
            },
        };
        Ok((
            game,
            vec![human, av],
            vec![state(BeliefState::uniform(types, 1)), state(BeliefState::uniform(3, 1))],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::validate_game;

    #[test]
    fn outcomes_absorb_with_zero_reward() {
        let cfg = HighwayConfig::default();
        let game = cfg.game().unwrap();
        assert!(validate_game(game.spec()).is_empty());
        for s in [cfg.merged_state(), cfg.collided_state()] {
            assert!(game.is_absorbing(s));
            for j in 0..9 {
                assert_eq!(game.rewards_at(s, j), vec![0.0, 0.0]);
            }
        }
    }

    #[test]
    fn yielding_av_lets_the_human_merge() {
        let cfg = HighwayConfig::default();
        let game = cfg.game().unwrap();
        // human holds, AV yields: follow the only successor each tick
        let j = game.joint_index(&[HOLD, YIELD]);
        let mut s = cfg.state_index(cfg.positions, 0);
        for _ in 0..cfg.positions {
            let row = game.transition_row(s, j);
            let next: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert_eq!(next.len(), 1);
            s = next[0];
        }
        assert_eq!(s, cfg.merged_state());
    }

    #[test]
    fn side_by_side_arrival_collides() {
        let cfg = HighwayConfig::default();
        let game = cfg.game().unwrap();
        let j = game.joint_index(&[HOLD, HOLD]);
        let s = cfg.state_index(1, 0);
        assert_eq!(game.transition_row(s, j)[cfg.collided_state()], 1.0);
        assert!((game.reward(0, s, j) - (-10.01)).abs() < 1e-12);
    }
}
