use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::game::{JointAction, TabularMarkovGame};
use crate::rng::RngStreams;

use super::ops::{act, belief_update_f, matrix_vec, neural_signal, neural_update_g, policy_refresh_h};
use super::{AgentSpec, Emission, MultilevelAgentState, Observation};

/// Which observation fields an agent is denied. `true` hides the field.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    #[serde(default)]
    pub opponent_actions: bool,
    #[serde(default)]
    pub signals: bool,
    #[serde(default)]
    pub outcome: bool,
}

impl ObservationMask {
    pub const NONE: ObservationMask = ObservationMask {
        opponent_actions: false,
        signals: false,
        outcome: false,
    };
    pub const ALL: ObservationMask = ObservationMask {
        opponent_actions: true,
        signals: true,
        outcome: true,
    };
}

/// Everything that happened in one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_state: usize,
    #[serde(default, skip_serializing_if = "signals_empty")]
    pub signals: Vec<Vec<f64>>,
    pub observations: Vec<Observation>,
}

fn signals_empty(s: &[Vec<f64>]) -> bool {
    s.iter().all(|v| v.is_empty())
}

/// Each agent draws from its own stream.
pub fn sample_joint_action(
    agents: &[MultilevelAgentState],
    s: usize,
    rngs: &mut RngStreams,
) -> Result<JointAction> {
    let actions = agents
        .iter()
        .zip(rngs.agents.iter_mut())
        .enumerate()
        .map(|(i, (agent, rng))| act(agent, s, rng).map_err(|e| e.for_agent(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointAction(actions))
}

/// Public signals in agent order; a decoder reads signals of earlier agents.
pub fn emit_signals(
    specs: &[AgentSpec],
    agents: &[MultilevelAgentState],
    s: usize,
    rngs: &mut RngStreams,
) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(agents.len());
    for (i, (spec, agent)) in specs.iter().zip(agents).enumerate() {
        let sig = match &spec.emission {
            Emission::None => Vec::new(),
            Emission::BeliefMean => agent.belief.values().to_vec(),
            Emission::Encode { targets, noise } => {
                let mut n = matrix_vec(&agent.theta.values, &targets[s])
                    .ok_or_else(|| MieError::usage("encoder shape mismatch").for_agent(i))?;
                if *noise > 0.0 {
                    for v in n.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rngs.agents[i]);
                        *v += noise * z;
                    }
                }
                n
            }
            Emission::Decode { source } => matrix_vec(&agent.theta.values, &out[*source])
                .ok_or_else(|| MieError::usage("decoder shape mismatch").for_agent(i))?,
        };
        out.push(sig);
    }
    Ok(out)
}

pub fn build_observations(
    game: &TabularMarkovGame,
    record: (usize, &JointAction, &[f64], usize),
    signals: &[Vec<f64>],
    masks: &[ObservationMask],
) -> Vec<Observation> {
    let (s, joint, rewards, next) = record;
    (0..game.num_agents())
        .map(|i| {
            let mask = masks.get(i).copied().unwrap_or_default();
            Observation {
                state: s,
                next_state: next,
                own_action: joint.0[i],
                reward: rewards[i],
                opponent_actions: (!mask.opponent_actions && game.num_agents() > 1)
                    .then(|| game.opponent_index(i, &joint.0)),
                signals: (!mask.signals).then(|| signals.to_vec()),
                outcome: (!mask.outcome).then_some(s),
            }
        })
        .collect()
}

fn due(t: u64, period: u64) -> bool {
    t.is_multiple_of(period)
}

fn update_one(
    game: &TabularMarkovGame,
    i: usize,
    spec: &AgentSpec,
    agent: &MultilevelAgentState,
    obs: &Observation,
    t: u64,
) -> Result<MultilevelAgentState> {
    let mut next = agent.clone();
    if due(t, spec.periods.belief) {
        next.belief = belief_update_f(&spec.belief_rule, &agent.belief, obs)?;
    }
    if due(t, spec.periods.neural) {
        if let Some(sig) = neural_signal(&spec.neural_rule, game, i, &next, obs) {
            next.theta = neural_update_g(&agent.theta, &sig)?;
        }
    }
    if due(t, spec.periods.policy) {
        next.policy = policy_refresh_h(&spec.policy_rule, &agent.policy, &next.theta, &next.belief, game, i)?;
    }
    Ok(next)
}

/// F, then G, then H for every agent; H sees the updated theta and belief.
pub fn update_agents(
    game: &TabularMarkovGame,
    specs: &[AgentSpec],
    agents: &[MultilevelAgentState],
    observations: &[Observation],
    t: u64,
) -> Result<Vec<MultilevelAgentState>> {
    (0..agents.len())
        .map(|i| {
            update_one(game, i, &specs[i], &agents[i], &observations[i], t).map_err(|e| e.for_agent(i))
        })
        .collect()
}

/// One application of the global operator: act, environment step, emissions,
/// observations, then the agent updates.
pub fn joint_step_phi(
    game: &TabularMarkovGame,
    specs: &[AgentSpec],
    agents: &[MultilevelAgentState],
    s: usize,
    t: u64,
    masks: &[ObservationMask],
    rngs: &mut RngStreams,
) -> Result<(usize, Vec<MultilevelAgentState>, StepRecord)> {
    if specs.len() != agents.len() || agents.len() != game.num_agents() {
        return Err(MieError::usage(format!(
            "game has {} agents, got {} specs and {} states",
            game.num_agents(),
            specs.len(),
            agents.len()
        )));
    }
    let joint = sample_joint_action(agents, s, rngs)?;
    let (next, rewards) = game.step(s, &joint, &mut rngs.env)?;
    let signals = emit_signals(specs, agents, s, rngs)?;
    let observations = build_observations(game, (s, &joint, &rewards, next), &signals, masks);
    let updated = update_agents(game, specs, agents, &observations, t)?;
    let record = StepRecord {
        state: s,
        actions: joint.0,
        rewards,
        next_state: next,
        signals,
        observations,
    };
    Ok((next, updated, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{
        BeliefRate, BeliefRule, BeliefState, NeuralParams, NeuralRule, OperatorPeriods, Policy,
        PolicyRule,
    };
    use crate::game::{repeated_game, GameSpec};
    use proptest::prelude::*;

    fn pennies() -> TabularMarkovGame {
        repeated_game(
            vec![2, 2],
            vec![vec![1.0, -1.0, -1.0, 1.0], vec![-1.0, 1.0, 1.0, -1.0]],
            0.95,
        )
        .unwrap()
    }

    fn q_learner() -> (AgentSpec, MultilevelAgentState) {
        let spec = AgentSpec {
            name: "q".into(),
            belief_rule: BeliefRule::EmpiricalFrequency {
                rate: BeliefRate::Harmonic { prior_weight: 1.0 },
            },
            neural_rule: NeuralRule::QLearning { discount: 0.0 },
            policy_rule: PolicyRule::Softmax,
            emission: Emission::None,
            periods: OperatorPeriods::default(),
        };
        let state = MultilevelAgentState {
            theta: NeuralParams::new(vec![0.0, 0.0], 0.1),
            belief: BeliefState::uniform(2, 1),
            policy: Policy::uniform_softmax(1, 2, 1.0, 0.0),
        };
        (spec, state)
    }

    fn toy() -> (TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>) {
        let game = TabularMarkovGame::new(GameSpec {
            states: 1,
            actions_per_agent: vec![1, 1],
            transition: vec![vec![vec![1.0]]],
            rewards: vec![vec![vec![0.0]], vec![vec![0.0]]],
            discount: 0.95,
            initial_dist: vec![1.0],
        })
        .unwrap();
        let spec = |source, gain| AgentSpec {
            name: String::new(),
            belief_rule: BeliefRule::Track { source, gain },
            neural_rule: NeuralRule::Static,
            policy_rule: PolicyRule::Fixed,
            emission: Emission::BeliefMean,
            periods: OperatorPeriods::default(),
        };
        let agent = |v: f64| MultilevelAgentState {
            theta: NeuralParams::new(vec![], 0.0),
            belief: BeliefState::point(vec![v]),
            policy: Policy::tabular_constant(vec![vec![1.0]], 11, None),
        };
        (game, vec![spec(1, 0.4), spec(0, 0.3)], vec![agent(0.9), agent(0.1)])
    }

    #[test]
    fn toy_step_matches_hand_update() {
        let (game, specs, agents) = toy();
        let mut rngs = RngStreams::new(1, 2);
        let (_, next, _) = joint_step_phi(&game, &specs, &agents, 0, 0, &[], &mut rngs).unwrap();
        assert!((next[0].belief.values()[0] - 0.58).abs() < 1e-15);
        assert!((next[1].belief.values()[0] - 0.34).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_is_left_alone() {
        let (game, specs, mut agents) = toy();
        agents[0].belief = BeliefState::point(vec![0.5]);
        agents[1].belief = BeliefState::point(vec![0.5]);
        let mut rngs = RngStreams::new(1, 2);
        let (_, next, _) = joint_step_phi(&game, &specs, &agents, 0, 0, &[], &mut rngs).unwrap();
        assert_eq!(next, agents);
    }

    #[test]
    fn q_updates_touch_only_the_visited_entry() {
        let game = pennies();
        let (spec, state) = q_learner();
        let specs = vec![spec.clone(), spec];
        let agents = vec![state.clone(), state];
        let mut rngs = RngStreams::new(7, 2);
        let (_, next, rec) = joint_step_phi(&game, &specs, &agents, 0, 0, &[], &mut rngs).unwrap();
        for i in 0..2 {
            let a = rec.actions[i];
            for k in 0..2 {
                let v = next[i].theta.values[k];
                if k == a {
                    assert!((v - 0.1 * rec.rewards[i]).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_agent_keeps_belief_but_still_learns() {
        let game = pennies();
        let (spec, state) = q_learner();
        let specs = vec![spec.clone(), spec];
        let mut agents = vec![state.clone(), state];
        let masks = [ObservationMask::ALL, ObservationMask::NONE];
        let mut rngs = RngStreams::new(3, 2);
        let mut s = 0;
        for t in 0..50 {
            let (n, next, _) = joint_step_phi(&game, &specs, &agents, s, t, &masks, &mut rngs).unwrap();
            s = n;
            agents = next;
        }
        assert_eq!(agents[0].belief, BeliefState::uniform(2, 1));
        assert!(agents[0].theta.values.iter().any(|v| *v != 0.0));
        assert_ne!(agents[1].belief, BeliefState::uniform(2, 1));
    }

    #[test]
    fn operator_periods_gate_updates() {
        let game = pennies();
        let (mut spec, state) = q_learner();
        spec.periods = OperatorPeriods {
            belief: 1,
            neural: 3,
            policy: 1,
        };
        let specs = vec![spec.clone(), spec];
        let agents = vec![state.clone(), state];
        let mut rngs = RngStreams::new(5, 2);
        let (_, next, _) = joint_step_phi(&game, &specs, &agents, 0, 1, &[], &mut rngs).unwrap();
        assert_eq!(next[0].theta, agents[0].theta);
        assert_ne!(next[0].belief, agents[0].belief);
    }

    fn run(seed: u64) -> Vec<StepRecord> {
        let game = pennies();
        let (spec, state) = q_learner();
        let specs = vec![spec.clone(), spec];
        let mut agents = vec![state.clone(), state];
        let mut rngs = RngStreams::new(seed, 2);
        let mut s = 0;
        (0..100)
            .map(|t| {
                let (n, next, rec) = joint_step_phi(&game, &specs, &agents, s, t, &[], &mut rngs).unwrap();
                s = n;
                agents = next;
                rec
            })
            .collect()
    }

    #[test]
    fn same_seed_same_trajectory() {
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    proptest! {
        #[test]
        fn bayes_stays_on_the_simplex(
            prior in prop::collection::vec(0.01f64..1.0, 2..6),
            lik in prop::collection::vec(0.0f64..5.0, 6),
            scale in 0.001f64..1000.0,
        ) {
            let z: f64 = prior.iter().sum();
            let prior: Vec<f64> = prior.iter().map(|p| p / z).collect();
            let lik = &lik[..prior.len()];
            prop_assume!(lik.iter().zip(&prior).any(|(l, p)| l * p > 0.0));
            let post = crate::agent::bayes_update(&prior, Some(lik)).unwrap();
            prop_assert!(post.iter().all(|p| *p >= 0.0));
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = lik.iter().map(|l| l * scale).collect();
            let post2 = crate::agent::bayes_update(&prior, Some(&scaled)).unwrap();
            for (a, b) in post.iter().zip(&post2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_policy_ignores_q_shifts(
            q in prop::collection::vec(-10.0f64..10.0, 3),
            shift in -100.0f64..100.0,
            beta in 0.1f64..10.0,
        ) {
            let game = repeated_game(vec![3], vec![vec![0.0; 3]], 0.9).unwrap();
            let policy = Policy::uniform_softmax(1, 3, beta, 0.0);
            let b = BeliefState::uniform(1, 0);
            let a = crate::agent::policy_refresh_h(
                &PolicyRule::Softmax, &policy, &NeuralParams::new(q.clone(), 0.1), &b, &game, 0).unwrap();
            let shifted: Vec<f64> = q.iter().map(|x| x + shift).collect();
            let c = crate::agent::policy_refresh_h(
                &PolicyRule::Softmax, &policy, &NeuralParams::new(shifted, 0.1), &b, &game, 0).unwrap();
            for (x, y) in a.rows()[0].iter().zip(c.rows()[0]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
