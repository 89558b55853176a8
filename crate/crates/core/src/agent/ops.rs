use rand::Rng;

use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;
use crate::rng::draw;

use super::rules::square_dim;
use super::{
    BeliefRule, BeliefState, LearningSignal, MultilevelAgentState, NeuralParams, NeuralRule,
    Observation, Policy, PolicyRule, SignalTarget,
};

/// `exp(beta * v)` normalised, computed after subtracting the maximum.
pub fn softmax(values: &[f64], beta: f64) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| (beta * (v - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Samples `a ~ pi(. | s, b)`.
pub fn act<R: Rng + ?Sized>(agent: &MultilevelAgentState, s: usize, rng: &mut R) -> Result<usize> {
    if s >= agent.policy.num_states() {
        return Err(MieError::usage(format!("state {s} outside the policy table")));
    }
    Ok(draw(rng, agent.policy.distribution(s, &agent.belief)))
}

/// Number of lattice points on the probability simplex of dimension `dim` with
/// `bins` levels per coordinate.
pub fn num_buckets(dim: usize, bins: usize) -> usize {
    if dim == 0 || bins == 0 {
        return 0;
    }
    binomial(bins - 1 + dim - 1, dim - 1)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Index of the simplex-lattice cell nearest to `probs` (largest-remainder rounding,
/// ties to the lowest coordinate), ranked lexicographically.
pub fn belief_bucket(probs: &[f64], bins: usize) -> usize {
    let dim = probs.len();
    if dim <= 1 || bins <= 1 {
        return 0;
    }
    let m = bins - 1;
    let scaled: Vec<f64> = probs.iter().map(|p| p.clamp(0.0, 1.0) * m as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remaining = m.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in &order {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    // over-assignment only happens through clamping round-off
    let mut excess = counts.iter().sum::<usize>().saturating_sub(m);
    for k in (0..dim).rev() {
        while excess > 0 && counts[k] > 0 {
            counts[k] -= 1;
            excess -= 1;
        }
    }
    let mut rank = 0;
    let mut left = m;
    for i in 0..dim - 1 {
        let parts_after = dim - i - 1;
        for v in 0..counts[i] {
            rank += binomial(left - v + parts_after - 1, parts_after - 1);
        }
        left -= counts[i];
    }
    rank
}

/// Bayesian posterior `b'(xi) ~ b(xi) p(o | xi)`; `None` likelihood means the
/// observation was masked and the belief is returned unchanged.
pub fn bayes_update(prior: &[f64], likelihood: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(lik) = likelihood else {
        return Ok(prior.to_vec());
    };
    if lik.len() != prior.len() {
        return Err(MieError::usage(format!(
            "likelihood has {} entries, belief has {}",
            lik.len(),
            prior.len()
        )));
    }
    if let Some(i) = lik.iter().position(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(MieError::numerical("likelihood must be finite and non-negative", Some(i)));
    }
    let post: Vec<f64> = prior.iter().zip(lik).map(|(p, l)| p * l).collect();
    let z: f64 = post.iter().sum();
    if z <= 0.0 {
        return Err(MieError::Inconsistent(
            "observation has zero likelihood under every hypothesis with prior mass".into(),
        ));
    }
    Ok(post.into_iter().map(|x| x / z).collect())
}

fn mix_toward(probs: &[f64], index: usize, rate: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| (1.0 - rate) * p + if k == index { rate } else { 0.0 })
        .collect()
}

fn signal(obs: &Observation, agent: usize) -> Option<&[f64]> {
    obs.signals
        .as_ref()
        .and_then(|s| s.get(agent))
        .map(|v| v.as_slice())
        .filter(|v| !v.is_empty())
}

/// Cognitive update `b' = F(b, o)` for the configured rule.
pub fn belief_update_f(
    rule: &BeliefRule,
    belief: &BeliefState,
    obs: &Observation,
) -> Result<BeliefState> {
    let mut next = belief.clone();
    if obs.is_masked() {
        return Ok(next);
    }
    match rule {
        BeliefRule::Static => {}
        BeliefRule::Bayes {
            likelihoods,
            nested_likelihoods,
        } => {
            let Some(o) = obs.opponent_actions else {
                return Ok(next);
            };
            let lik: Vec<f64> = likelihoods.iter().map(|row| row[o]).collect();
            *next.values_mut() = bayes_update(belief.values(), Some(&lik))?;
            if let (Some(nested), Some(table)) = (next.nested.as_mut(), nested_likelihoods) {
                let lik: Vec<f64> = table.iter().map(|row| row[obs.own_action]).collect();
                *nested.values_mut() = bayes_update(nested.values(), Some(&lik))?;
                nested.updates += 1;
            }
            next.updates += 1;
        }
        BeliefRule::EmpiricalFrequency { rate } => {
            let Some(o) = obs.opponent_actions else {
                return Ok(next);
            };
            let eta = rate.at(belief.updates);
            *next.values_mut() = mix_toward(belief.values(), o, eta);
            if let Some(nested) = next.nested.as_mut() {
                let eta = rate.at(nested.updates);
                *nested.values_mut() = mix_toward(nested.values(), obs.own_action, eta);
                nested.updates += 1;
            }
            next.updates += 1;
        }
        BeliefRule::Track { source, gain } => {
            let Some(sig) = signal(obs, *source) else {
                return Ok(next);
            };
            let mean = next.values_mut();
            if sig.len() != mean.len() {
                return Err(MieError::usage("tracked signal and belief differ in dimension"));
            }
            for (m, x) in mean.iter_mut().zip(sig) {
                *m += gain * (x - *m);
            }
        }
        BeliefRule::LinearModel {
            input,
            output,
            gain,
        } => {
            let (Some(x), Some(y)) = (signal(obs, *input), signal(obs, *output)) else {
                return Ok(next);
            };
            let d = x.len();
            let norm: f64 = x.iter().map(|v| v * v).sum();
            if norm > 0.0 {
                let m = next.values_mut();
                if m.len() != d * d || y.len() != d {
                    return Err(MieError::usage("linear-model belief dimension mismatch"));
                }
                let pred: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum())
                    .collect();
                for r in 0..d {
                    let err = y[r] - pred[r];
                    for c in 0..d {
                        m[r * d + c] += gain * err * x[c] / norm;
                    }
                }
            }
        }
        BeliefRule::BiasedOutcome {
            rate,
            bias,
            rewarding_state,
        } => {
            let Some(outcome) = obs.outcome else {
                return Ok(next);
            };
            let o = if outcome == *rewarding_state { 1.0 } else { 0.0 };
            let b = belief.values()[0];
            next.values_mut()[0] = ((1.0 - rate) * b + rate * (o - bias)).clamp(0.0, 1.0);
        }
        BeliefRule::GatedOutcome {
            rate,
            gate_action,
            event_state,
        } => {
            let Some(outcome) = obs.outcome else {
                return Ok(next);
            };
            if obs.own_action == *gate_action {
                let o = if outcome == *event_state { 1.0 } else { 0.0 };
                let b = belief.values()[0];
                next.values_mut()[0] = (1.0 - rate) * b + rate * o;
            }
        }
        BeliefRule::Linear { matrix } => {
            let b = belief.values().to_vec();
            let out = next.values_mut();
            for (r, row) in matrix.iter().enumerate() {
                out[r] = row.iter().zip(&b).map(|(a, x)| a * x).sum();
            }
        }
    }
    if let Some(i) = next.values().iter().position(|v| !v.is_finite()) {
        return Err(MieError::numerical("belief update produced a non-finite value", Some(i)));
    }
    Ok(next)
}

/// Temporal-difference signal `delta = r + gamma max_a' Q(s', a') - Q(s, a)` on a
/// row-major `Q[s][a]` table.
pub fn td_signal(
    q: &[f64],
    n_actions: usize,
    s: usize,
    a: usize,
    reward: f64,
    next: usize,
    discount: f64,
) -> LearningSignal {
    let best_next = q[next * n_actions..(next + 1) * n_actions]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let idx = s * n_actions + a;
    LearningSignal {
        delta: reward + discount * best_next - q[idx],
        target: SignalTarget::Index(idx),
    }
}

/// `theta' = theta + alpha * delta * direction`.
pub fn neural_update_g(theta: &NeuralParams, signal: &LearningSignal) -> Result<NeuralParams> {
    if !signal.delta.is_finite() {
        return Err(MieError::numerical("non-finite learning signal", None));
    }
    let mut next = theta.clone();
    let alpha = theta.learning_rate;
    match &signal.target {
        SignalTarget::Index(i) => {
            let v = next
                .values
                .get_mut(*i)
                .ok_or_else(|| MieError::usage(format!("signal index {i} outside theta")))?;
            *v += alpha * signal.delta;
            if !v.is_finite() {
                return Err(MieError::numerical("neural update overflowed", Some(*i)));
            }
        }
        SignalTarget::Direction(dir) => {
            if dir.len() != next.values.len() {
                return Err(MieError::usage("gradient direction length differs from theta"));
            }
            for (i, (v, g)) in next.values.iter_mut().zip(dir).enumerate() {
                *v += alpha * signal.delta * g;
                if !v.is_finite() {
                    return Err(MieError::numerical("neural update overflowed", Some(i)));
                }
            }
        }
    }
    Ok(next)
}

/// Learning signal produced by the configured neural rule, if the rule learns at all
/// from this observation.
pub(crate) fn neural_signal(
    rule: &NeuralRule,
    game: &TabularMarkovGame,
    index: usize,
    state: &MultilevelAgentState,
    obs: &Observation,
) -> Option<LearningSignal> {
    match rule {
        NeuralRule::Static => None,
        NeuralRule::QLearning { discount } => Some(td_signal(
            &state.theta.values,
            game.num_actions(index),
            obs.state,
            obs.own_action,
            obs.reward,
            obs.next_state,
            *discount,
        )),
        NeuralRule::EncoderGradient { targets, feedback } => {
            let u = signal(obs, *feedback)?;
            let t = &targets[obs.state];
            let d = t.len();
            let model = state.belief.values();
            if model.len() != d * d {
                return None;
            }
            // grad_E = D^T (u - t) t^T
            let err: Vec<f64> = u.iter().zip(t).map(|(a, b)| a - b).collect();
            let back: Vec<f64> = (0..d)
                .map(|c| (0..d).map(|r| model[r * d + c] * err[r]).sum())
                .collect();
            let dir = (0..d * d).map(|k| back[k / d] * t[k % d]).collect();
            Some(LearningSignal {
                delta: -1.0,
                target: SignalTarget::Direction(dir),
            })
        }
        NeuralRule::DecoderLms { targets, input } => {
            let x = signal(obs, *input)?;
            let u = signal(obs, index)?;
            let t = &targets[obs.state];
            let d = t.len();
            let dir = (0..d * d).map(|k| (u[k / d] - t[k / d]) * x[k % d]).collect();
            Some(LearningSignal {
                delta: -1.0,
                target: SignalTarget::Direction(dir),
            })
        }
    }
}

/// `E_{xi ~ b}[r_i(s, a, xi)]` for every own action.
fn expected_payoffs(game: &TabularMarkovGame, agent: usize, s: usize, belief: &[f64]) -> Vec<f64> {
    (0..game.num_actions(agent))
        .map(|a| {
            belief
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(o, p)| {
                    let j = game.joint_index(&game.compose_joint(agent, a, o));
                    p * game.reward(agent, s, j)
                })
                .sum()
        })
        .collect()
}

/// Policy adaptation `pi' = H(pi, theta', b')`.
pub fn policy_refresh_h(
    rule: &PolicyRule,
    policy: &Policy,
    theta: &NeuralParams,
    belief: &BeliefState,
    game: &TabularMarkovGame,
    agent: usize,
) -> Result<Policy> {
    let n_actions = game.num_actions(agent);
    match (rule, policy) {
        (PolicyRule::Fixed, _) => Ok(policy.clone()),
        (
            PolicyRule::Softmax,
            Policy::SoftmaxOfQ {
                beta,
                belief_weight,
                probs,
            },
        ) => {
            let q = &theta.values;
            let next = (0..probs.len())
                .map(|s| {
                    let mut v: Vec<f64> = if q.is_empty() {
                        vec![0.0; n_actions]
                    } else {
                        q[s * n_actions..(s + 1) * n_actions].to_vec()
                    };
                    if *belief_weight != 0.0 {
                        if let Some(b) = belief.probs() {
                            for (x, e) in v.iter_mut().zip(expected_payoffs(game, agent, s, b)) {
                                *x += belief_weight * e;
                            }
                        }
                    }
                    softmax(&v, *beta)
                })
                .collect();
            Ok(Policy::SoftmaxOfQ {
                beta: *beta,
                belief_weight: *belief_weight,
                probs: next,
            })
        }
        (PolicyRule::SmoothBestResponse { beta }, Policy::Tabular { bins, table }) => {
            let b = belief
                .probs()
                .ok_or_else(|| MieError::usage("smooth best response needs a categorical belief"))?;
            let mut table = table.clone();
            for (s, buckets) in table.iter_mut().enumerate() {
                let k = if buckets.len() == 1 { 0 } else { belief_bucket(b, *bins) };
                buckets[k] = softmax(&expected_payoffs(game, agent, s, b), *beta);
            }
            Ok(Policy::Tabular { bins: *bins, table })
        }
        (
            PolicyRule::OutcomeSoftmax {
                beta,
                value_if_event,
                value_otherwise,
            },
            Policy::SoftmaxOfQ {
                beta: own_beta,
                belief_weight,
                probs,
            },
        ) => {
            let b = belief.values()[0];
            let v: Vec<f64> = value_if_event
                .iter()
                .zip(value_otherwise)
                .map(|(e, o)| b * e + (1.0 - b) * o)
                .collect();
            let row = softmax(&v, *beta);
            Ok(Policy::SoftmaxOfQ {
                beta: *own_beta,
                belief_weight: *belief_weight,
                probs: vec![row; probs.len()],
            })
        }
        _ => Err(MieError::usage("policy rule does not match the policy kind")),
    }
}

pub(crate) fn matrix_vec(m: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let d = square_dim(m.len())?;
    if x.len() != d {
        return None;
    }
    Some((0..d).map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum()).collect())
}
