//! Estimation from interaction logs: empirical policies, belief filters,
//! belief-policy divergence, shared neural subspaces, convergence and belief-depth
//! model comparison.

mod cca;
mod kalman;

pub use cca::{cca_shared_subspace, SubspaceResult};
pub use kalman::{kalman_filter, scalar_steady_gain, KalmanOutput, LinearGaussianModel};

use serde::{Deserialize, Serialize};

use crate::agent::{bayes_update, softmax};
use crate::equilibrium::{distance_series, level_steps, DistanceWeights, Level, ToleranceConfig};
use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;
use crate::mdp::StatePolicy;
use crate::sim::{InteractionLog, TickRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPolicy {
    pub agent: usize,
    pub smoothing: f64,
    pub counts: Vec<Vec<u64>>,
    /// `None` for states that were never visited when smoothing is zero.
    pub probs: Vec<Option<Vec<f64>>>,
}

impl EmpiricalPolicy {
    /// Rows with undefined states replaced by uniform.
    pub fn filled(&self) -> StatePolicy {
        self.probs
            .iter()
            .zip(&self.counts)
            .map(|(p, c)| p.clone().unwrap_or_else(|| vec![1.0 / c.len() as f64; c.len()]))
            .collect()
    }
}

/// `(N(s,a) + c) / (sum_a' N(s,a') + c |A|)`.
pub fn empirical_policy(
    ticks: &[TickRecord],
    agent: usize,
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<EmpiricalPolicy> {
    if ticks.is_empty() {
        return Err(MieError::InsufficientData("empty log".into()));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(MieError::usage("smoothing must be finite and non-negative"));
    }
    let mut counts = vec![vec![0u64; num_actions]; num_states];
    for t in ticks {
        let a = *t
            .actions
            .get(agent)
            .ok_or_else(|| MieError::Log(format!("tick {} has no action for agent {agent}", t.t)))?;
        if t.state >= num_states || a >= num_actions {
            return Err(MieError::Log(format!("tick {} is outside the game's index ranges", t.t)));
        }
        counts[t.state][a] += 1;
    }
    let probs = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            let z = total as f64 + smoothing * num_actions as f64;
            (z > 0.0).then(|| row.iter().map(|&n| (n as f64 + smoothing) / z).collect())
        })
        .collect();
    Ok(EmpiricalPolicy {
        agent,
        smoothing,
        counts,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "nats", rename_all = "snake_case")]
pub enum Divergence {
    Finite(f64),
    /// The belief rules out an action the opponent was seen to take.
    Infinite,
}

impl Divergence {
    pub fn value(&self) -> f64 {
        match self {
            Divergence::Finite(v) => *v,
            Divergence::Infinite => f64::INFINITY,
        }
    }
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(MieError::usage(format!("distributions differ in length ({} vs {})", p.len(), q.len())));
    }
    let mut sum = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(Divergence::Infinite);
            }
            sum += a * (a / b).ln();
        }
    }
    Ok(Divergence::Finite(sum.max(0.0)))
}

/// `KL(pi_hat_opponent(.|s) || belief)`: how badly the belief predicts observed play.
pub fn belief_policy_divergence(belief: &[f64], opponent: &EmpiricalPolicy, s: usize) -> Result<Divergence> {
    let row = opponent
        .probs
        .get(s)
        .ok_or_else(|| MieError::usage(format!("state {s} out of range")))?
        .as_ref()
        .ok_or_else(|| MieError::InsufficientData(format!("opponent never seen in state {s}")))?;
    kl_divergence(row, belief)
}

/// Posterior over candidate policies of `agent` after each tick.
pub fn bayes_policy_filter(
    ticks: &[TickRecord],
    agent: usize,
    hypotheses: &[StatePolicy],
    prior: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if hypotheses.len() != prior.len() {
        return Err(MieError::usage("one prior weight per hypothesis is needed"));
    }
    let mut post = prior.to_vec();
    let mut out = Vec::with_capacity(ticks.len());
    for t in ticks {
        let a = t.actions[agent];
        let lik: Vec<f64> = hypotheses
            .iter()
            .map(|h| h.get(t.state).and_then(|r| r.get(a)).copied().unwrap_or(0.0))
            .collect();
        post = bayes_update(&post, Some(&lik)).map_err(|e| e.at_tick(t.t))?;
        out.push(post.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub neural: Option<u64>,
    pub cognitive: Option<u64>,
    pub behavioral: Option<u64>,
    /// Earliest snapshot from which every level is stable over the window.
    pub all_levels: Option<u64>,
    pub distance: Vec<(u64, f64)>,
}

pub fn convergence_report(
    game: &TabularMarkovGame,
    log: &InteractionLog,
    tol: &ToleranceConfig,
    weights: &DistanceWeights,
) -> Result<ConvergenceReport> {
    tol.validate()?;
    let snaps = &log.snapshots;
    let w = tol.window;
    if snaps.len() < w + 1 {
        return Err(MieError::InsufficientData(format!(
            "{} snapshots, drift window {w} needs at least {}",
            snaps.len(),
            w + 1
        )));
    }
    let levels = [
        (Level::Neural, tol.eps_neural),
        (Level::Cognitive, tol.eps_cognitive),
        (Level::Behavioral, tol.eps_policy),
    ];
    let steps: Vec<_> = snaps.windows(2).map(|p| level_steps(&p[0].agents, &p[1].agents)).collect();
    let stable_from = |k: usize, level: Level, eps: f64| steps[k..k + w].iter().all(|s| s.get(level) < eps);
    let first = |pred: &dyn Fn(usize) -> bool| (0..=steps.len() - w).find(|&k| pred(k)).map(|k| snaps[k].t);
    let per: Vec<Option<u64>> = levels
        .iter()
        .map(|&(l, eps)| first(&|k| stable_from(k, l, eps)))
        .collect();
    let all_levels = first(&|k| levels.iter().all(|&(l, eps)| stable_from(k, l, eps)));
    Ok(ConvergenceReport {
        neural: per[0],
        cognitive: per[1],
        behavioral: per[2],
        all_levels,
        distance: distance_series(game, log, weights)?,
    })
}

/// Ticks after `from` until `|metric| < threshold` first holds, measured on the
/// state at the start of each tick.
pub fn recovery_time(log: &InteractionLog, metric: &str, threshold: f64, from: u64) -> Result<Option<u64>> {
    let col = log
        .header
        .metric_names
        .iter()
        .position(|m| m == metric)
        .ok_or_else(|| MieError::usage(format!("log has no metric `{metric}`")))?;
    Ok(log
        .ticks
        .iter()
        .filter(|t| t.t >= from)
        .find(|t| t.metrics[col].abs() < threshold)
        .map(|t| t.t - from))
}

/// Learning-rate schedule for the fitted belief models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", content = "rate", rename_all = "snake_case")]
pub enum FitRate {
    Harmonic,
    Constant(f64),
}

impl FitRate {
    fn at(&self, n: u64) -> f64 {
        match self {
            FitRate::Harmonic => 1.0 / (n as f64 + 2.0),
            FitRate::Constant(r) => *r,
        }
    }
}

const BETAS: [f64; 7] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
const RATES: [FitRate; 6] = [
    FitRate::Harmonic,
    FitRate::Constant(0.01),
    FitRate::Constant(0.03),
    FitRate::Constant(0.1),
    FitRate::Constant(0.3),
    FitRate::Constant(0.6),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScore {
    pub depth: u8,
    /// Summed over the held-out ticks.
    pub log_likelihood: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<FitRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthComparison {
    pub agent: usize,
    pub train_ticks: usize,
    pub holdout_ticks: usize,
    pub scores: Vec<DepthScore>,
    pub best_depth: u8,
}

fn mix_toward(p: &mut [f64], k: usize, eta: f64) {
    for (j, v) in p.iter_mut().enumerate() {
        *v = (1.0 - eta) * *v + if j == k { eta } else { 0.0 };
    }
}

/// Expected reward of `agent` for each own action against a distribution over the
/// other agent's actions.
fn expected(game: &TabularMarkovGame, agent: usize, s: usize, other: &[f64]) -> Vec<f64> {
    (0..game.num_actions(agent))
        .map(|a| {
            other
                .iter()
                .enumerate()
                .map(|(o, p)| p * game.reward(agent, s, game.joint_index(&game.compose_joint(agent, a, o))))
                .sum()
        })
        .collect()
}

/// Runs a belief model over the whole log and returns the (train, holdout) log-likelihoods.
fn score_model(
    game: &TabularMarkovGame,
    ticks: &[TickRecord],
    split: usize,
    agent: usize,
    depth: u8,
    beta: f64,
    rate: FitRate,
) -> (f64, f64) {
    let opp = 1 - agent;
    let mut belief = vec![1.0 / game.num_actions(opp) as f64; game.num_actions(opp)];
    let mut nested = vec![1.0 / game.num_actions(agent) as f64; game.num_actions(agent)];
    let (mut train, mut hold) = (0.0, 0.0);
    for (n, t) in ticks.iter().enumerate() {
        let s = t.state;
        let predicted_opp = if depth == 2 {
            softmax(&expected(game, opp, s, &nested), beta)
        } else {
            belief.clone()
        };
        let p = softmax(&expected(game, agent, s, &predicted_opp), beta);
        let ll = p[t.actions[agent]].max(1e-300).ln();
        if n < split {
            train += ll;
        } else {
            hold += ll;
        }
        let eta = rate.at(n as u64);
        mix_toward(&mut belief, t.actions[opp], eta);
        mix_toward(&mut nested, t.actions[agent], eta);
    }
    (train, hold)
}

/// Fits belief models of increasing depth to `agent`'s actions on a training prefix
/// and scores one-step-ahead predictions on the held-out suffix.
///
/// Depth 0 is a fixed mixed strategy per state. Depth 1 smoothly best-responds to a
/// running estimate of the opponent's play. Depth 2 predicts the opponent as a depth-1
/// player who tracks this agent, then best-responds to that prediction.
pub fn belief_depth_comparison(
    game: &TabularMarkovGame,
    ticks: &[TickRecord],
    agent: usize,
    depths: &[u8],
    holdout: f64,
) -> Result<DepthComparison> {
    if game.num_agents() != 2 {
        return Err(MieError::usage("depth comparison needs a two-agent game"));
    }
    if agent > 1 {
        return Err(MieError::usage(format!("agent {agent} out of range")));
    }
    if !(holdout > 0.0 && holdout <= 0.5) {
        return Err(MieError::usage(format!("holdout fraction must lie in (0, 0.5], got {holdout}")));
    }
    if depths.is_empty() || depths.iter().any(|d| *d > 2) {
        return Err(MieError::usage("depths must be a non-empty subset of {0, 1, 2}"));
    }
    let n_hold = ((ticks.len() as f64 * holdout).round() as usize).max(1);
    if ticks.len() < n_hold + 1 {
        return Err(MieError::InsufficientData(format!(
            "{} ticks leave no training data for a {n_hold}-tick holdout",
            ticks.len()
        )));
    }
    let split = ticks.len() - n_hold;
    let mut scores = Vec::new();
    for &depth in depths {
        let score = if depth == 0 {
            let fit = empirical_policy(&ticks[..split], agent, game.num_states(), game.num_actions(agent), 1.0)?;
            let table = fit.filled();
            let ll = ticks[split..]
                .iter()
                .map(|t| table[t.state][t.actions[agent]].ln())
                .sum();
            DepthScore {
                depth,
                log_likelihood: ll,
                beta: None,
                rate: None,
            }
        } else {
            let mut best: Option<(f64, f64, f64, FitRate)> = None;
            for &beta in &BETAS {
                for &rate in &RATES {
                    let (train, hold) = score_model(game, ticks, split, agent, depth, beta, rate);
                    if best.is_none_or(|b| train > b.0) {
                        best = Some((train, hold, beta, rate));
                    }
                }
            }
            let (_, hold, beta, rate) = best.expect("grid is non-empty");
            DepthScore {
                depth,
                log_likelihood: hold,
                beta: Some(beta),
                rate: Some(rate),
            }
        };
        scores.push(score);
    }
    let best_depth = scores
        .iter()
        .fold(None::<&DepthScore>, |b, s| match b {
            Some(b) if b.log_likelihood >= s.log_likelihood => Some(b),
            _ => Some(s),
        })
        .map(|s| s.depth)
        .expect("at least one depth");
    Ok(DepthComparison {
        agent,
        train_ticks: split,
        holdout_ticks: n_hold,
        scores,
        best_depth,
    })
}
