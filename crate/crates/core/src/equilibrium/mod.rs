//! Equilibrium diagnostics: per-level residuals, best-response gaps, the joint
//! equilibrium check, distance to equilibrium, fixed points, local stability and
//! basins of attraction.

mod basin;
mod meanfield;

pub use basin::{basin_map, Attractor, Axis, BasinCell, BasinMap, BasinMethod, BasinOptions, CellStatus};
pub use meanfield::{
    classify_stability, find_fixed_point, mean_field_jacobian, Expectation, FixedPointOptions,
    FixedPointResult, JacobianEstimate, Levels, MeanField, MAX_JACOBIAN_DIM, Residual, Stability, StabilityReport,
    StateWeighting,
};

use serde::{Deserialize, Serialize};

use crate::agent::{BeliefState, MultilevelAgentState};
use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;
use crate::mdp::{single_agent_mdp, StatePolicy};
use crate::sim::{InteractionLog, Snapshot};

fn push_belief(out: &mut Vec<f64>, b: &BeliefState) {
    match b.probs() {
        Some(p) => out.extend_from_slice(&p[..p.len() - 1]),
        None => out.extend_from_slice(b.values()),
    }
    if let Some(n) = &b.nested {
        push_belief(out, n);
    }
}

fn take_belief(b: &mut BeliefState, x: &[f64], k: &mut usize) {
    let categorical = b.probs().is_some();
    let v = b.values_mut();
    let n = if categorical { v.len() - 1 } else { v.len() };
    v[..n].copy_from_slice(&x[*k..*k + n]);
    if categorical {
        v[n] = 1.0 - x[*k..*k + n].iter().sum::<f64>();
    }
    *k += n;
    if let Some(nested) = b.nested.as_mut() {
        take_belief(nested, x, k);
    }
}

/// Joint state as one vector, level-major: every agent's theta, then every belief,
/// then every policy row.
///
/// Probability vectors drop their last coordinate so the coordinates are free;
/// Gaussian beliefs contribute their mean only.
pub fn flatten(agents: &[MultilevelAgentState]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in agents {
        out.extend_from_slice(&a.theta.values);
    }
    for a in agents {
        push_belief(&mut out, &a.belief);
    }
    for a in agents {
        for row in a.policy.rows() {
            out.extend_from_slice(&row[..row.len() - 1]);
        }
    }
    out
}

/// Inverse of [`flatten`] on the layout of `template`. Covariances, update counters
/// and policy hyperparameters come from the template.
pub fn unflatten(template: &[MultilevelAgentState], x: &[f64]) -> Result<Vec<MultilevelAgentState>> {
    let dim = flatten(template).len();
    if x.len() != dim {
        return Err(MieError::usage(format!(
            "state vector has {} entries, layout needs {dim}",
            x.len()
        )));
    }
    let mut out = template.to_vec();
    let mut k = 0;
    for a in out.iter_mut() {
        let n = a.theta.values.len();
        a.theta.values.copy_from_slice(&x[k..k + n]);
        k += n;
    }
    for a in out.iter_mut() {
        take_belief(&mut a.belief, x, &mut k);
    }
    for a in out.iter_mut() {
        for row in a.policy.rows_mut() {
            let n = row.len() - 1;
            row[..n].copy_from_slice(&x[k..k + n]);
            row[n] = 1.0 - x[k..k + n].iter().sum::<f64>();
            k += n;
        }
    }
    Ok(out)
}

/// Coordinate names matching [`flatten`].
pub fn layout(agents: &[MultilevelAgentState]) -> Vec<String> {
    fn belief_names(out: &mut Vec<String>, i: usize, b: &BeliefState, depth: usize) {
        let n = b.values().len() - usize::from(b.probs().is_some());
        out.extend((0..n).map(|k| format!("agent{i}.belief{}[{k}]", ".nested".repeat(depth))));
        if let Some(nb) = &b.nested {
            belief_names(out, i, nb, depth + 1);
        }
    }
    let mut out = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        out.extend((0..a.theta.values.len()).map(|k| format!("agent{i}.theta[{k}]")));
    }
    for (i, a) in agents.iter().enumerate() {
        belief_names(&mut out, i, &a.belief, 0);
    }
    for (i, a) in agents.iter().enumerate() {
        for (r, row) in a.policy.rows().iter().enumerate() {
            out.extend((0..row.len() - 1).map(|k| format!("agent{i}.policy[{r}][{k}]")));
        }
    }
    out
}

pub fn joint_policy(agents: &[MultilevelAgentState]) -> Vec<StatePolicy> {
    agents.iter().map(|a| a.policy.state_policy(&a.belief)).collect()
}

/// `sum_s mu0(s) (V*_i(s) - V^pi_i(s))` with the other agents' policies held fixed.
pub fn brgap(game: &TabularMarkovGame, joint: &[StatePolicy], agent: usize) -> Result<f64> {
    let mdp = single_agent_mdp(game, agent, joint)?;
    let (best, _) = mdp.solve(1e-11, 1_000_000)?;
    let own = mdp.evaluate(&joint[agent]).map_err(|e| e.for_agent(agent))?;
    let gap: f64 = game
        .initial_dist()
        .iter()
        .zip(best.iter().zip(&own))
        .map(|(m, (b, v))| m * (b - v))
        .sum();
    // the optimum can only trail the policy's own value by solver round-off
    Ok(gap.max(0.0))
}

pub fn brgaps(game: &TabularMarkovGame, agents: &[MultilevelAgentState]) -> Result<Vec<f64>> {
    let joint = joint_policy(agents);
    (0..agents.len()).map(|i| brgap(game, &joint, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default = "default_eps")]
    pub eps_neural: f64,
    #[serde(default = "default_eps")]
    pub eps_cognitive: f64,
    /// Per-snapshot policy step used by the drift detector.
    #[serde(default = "default_eps")]
    pub eps_policy: f64,
    #[serde(default = "default_eps")]
    pub eps_brgap: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Monte Carlo samples for residuals and the mean-field map.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Half-width of the neutral band around the unit circle.
    #[serde(default = "default_eps")]
    pub neutral_band: f64,
}

fn default_eps() -> f64 {
    1e-3
}
fn default_window() -> usize {
    3
}
fn default_samples() -> usize {
    1000
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            eps_neural: default_eps(),
            eps_cognitive: default_eps(),
            eps_policy: default_eps(),
            eps_brgap: default_eps(),
            window: default_window(),
            samples: default_samples(),
            neutral_band: default_eps(),
        }
    }
}

impl ToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_neural", self.eps_neural),
            ("eps_cognitive", self.eps_cognitive),
            ("eps_policy", self.eps_policy),
            ("eps_brgap", self.eps_brgap),
            ("neutral_band", self.neutral_band),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MieError::usage(format!("tolerance `{name}` must be positive, got {v}")));
            }
        }
        if self.window < 2 {
            return Err(MieError::usage("drift window must be >= 2"));
        }
        if self.samples == 0 {
            return Err(MieError::usage("sample count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// All three conditions hold.
    Full,
    /// Exactly two conditions hold.
    Marginal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub neural_residual: Vec<Residual>,
    pub cognitive_residual: Vec<Residual>,
    pub brgap: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    pub verdict: Verdict,
    /// Conditions that hold: `i` neural, `ii` cognitive, `iii` behavioral.
    pub satisfied: Vec<String>,
    pub tolerances: ToleranceConfig,
}

impl EquilibriumReport {
    pub fn holds(&self, condition: &str) -> bool {
        self.satisfied.iter().any(|c| c == condition)
    }
}

/// Combines per-agent residuals and gaps into the three conditions and a verdict.
pub fn check_mie(
    neural: Vec<Residual>,
    cognitive: Vec<Residual>,
    gaps: Vec<f64>,
    tol: ToleranceConfig,
) -> Result<EquilibriumReport> {
    tol.validate()?;
    let pass = [
        neural.iter().all(|r| r.value <= tol.eps_neural),
        cognitive.iter().all(|r| r.value <= tol.eps_cognitive),
        gaps.iter().all(|g| *g <= tol.eps_brgap),
    ];
    let satisfied: Vec<String> = ["i", "ii", "iii"]
        .iter()
        .zip(pass)
        .filter(|(_, p)| *p)
        .map(|(c, _)| c.to_string())
        .collect();
    let verdict = match satisfied.len() {
        3 => Verdict::Full,
        2 => Verdict::Marginal,
        _ => Verdict::None,
    };
    Ok(EquilibriumReport {
        neural_residual: neural,
        cognitive_residual: cognitive,
        brgap: gaps,
        distance: None,
        verdict,
        satisfied,
        tolerances: tol,
    })
}

/// Residuals and gaps at `agents`, then [`check_mie`].
pub fn evaluate_mie(
    field: &MeanField,
    agents: &[MultilevelAgentState],
    tol: ToleranceConfig,
) -> Result<EquilibriumReport> {
    let neural = field.residuals(agents, Levels::Neural)?;
    let cognitive = field.residuals(agents, Levels::Cognitive)?;
    let gaps = brgaps(&field.scenario.game, agents)?;
    check_mie(neural, cognitive, gaps, tol)
}

/// Per-level step sizes between two joint states: theta in l2, beliefs in l1,
/// policies in total variation summed over rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSteps {
    pub neural: f64,
    pub cognitive: f64,
    pub behavioral: f64,
}

fn belief_l1(a: &BeliefState, b: &BeliefState) -> f64 {
    let own: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    own + match (&a.nested, &b.nested) {
        (Some(x), Some(y)) => belief_l1(x, y),
        _ => 0.0,
    }
}

pub fn level_steps(a: &[MultilevelAgentState], b: &[MultilevelAgentState]) -> LevelSteps {
    let mut sq = 0.0;
    let mut cognitive = 0.0;
    let mut behavioral = 0.0;
    for (x, y) in a.iter().zip(b) {
        sq += x.theta.values.iter().zip(&y.theta.values).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        cognitive += belief_l1(&x.belief, &y.belief);
        for (r, s) in x.policy.rows().iter().zip(y.policy.rows()) {
            behavioral += 0.5 * r.iter().zip(s).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
    }
    LevelSteps {
        neural: sq.sqrt(),
        cognitive,
        behavioral,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceWeights {
    #[serde(default = "unit")]
    pub neural: f64,
    #[serde(default = "unit")]
    pub cognitive: f64,
    #[serde(default = "unit")]
    pub behavioral: f64,
    #[serde(default = "unit")]
    pub brgap: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            neural: 1.0,
            cognitive: 1.0,
            behavioral: 1.0,
            brgap: 1.0,
        }
    }
}

/// Weighted step sizes from `now` to `next` plus the summed gaps at `now`.
pub fn distance_to_equilibrium(
    game: &TabularMarkovGame,
    now: &[MultilevelAgentState],
    next: &[MultilevelAgentState],
    w: &DistanceWeights,
) -> Result<f64> {
    let steps = level_steps(now, next);
    let gaps: f64 = brgaps(game, now)?.iter().sum();
    Ok(w.neural * steps.neural + w.cognitive * steps.cognitive + w.behavioral * steps.behavioral + w.brgap * gaps)
}

/// Distance between the snapshot at `t` and the next snapshot in the log.
pub fn distance_at(
    game: &TabularMarkovGame,
    log: &InteractionLog,
    t: u64,
    w: &DistanceWeights,
) -> Result<f64> {
    let k = log
        .snapshots
        .iter()
        .position(|s| s.t == t)
        .ok_or_else(|| MieError::InsufficientData(format!("no snapshot at tick {t}")))?;
    let next = log
        .snapshots
        .get(k + 1)
        .ok_or_else(|| MieError::InsufficientData(format!("no snapshot after tick {t}")))?;
    distance_to_equilibrium(game, &log.snapshots[k].agents, &next.agents, w)
}

/// Distance at every snapshot that has a successor snapshot, as `(t, E_t)`.
pub fn distance_series(
    game: &TabularMarkovGame,
    log: &InteractionLog,
    w: &DistanceWeights,
) -> Result<Vec<(u64, f64)>> {
    log.snapshots
        .windows(2)
        .map(|p| Ok((p[0].t, distance_to_equilibrium(game, &p[0].agents, &p[1].agents, w)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Neural,
    Cognitive,
    Behavioral,
}

impl LevelSteps {
    pub fn get(&self, level: Level) -> f64 {
        match level {
            Level::Neural => self.neural,
            Level::Cognitive => self.cognitive,
            Level::Behavioral => self.behavioral,
        }
    }
}

/// First snapshot tick from which the level's step stays below `tol` for `window`
/// consecutive snapshot intervals.
pub fn drift_detector(snapshots: &[Snapshot], level: Level, tol: f64, window: usize) -> Result<Option<u64>> {
    if window == 0 {
        return Err(MieError::usage("window must be >= 1"));
    }
    if snapshots.len() < window + 1 {
        return Err(MieError::InsufficientData(format!(
            "{} snapshots, drift window {window} needs at least {}",
            snapshots.len(),
            window + 1
        )));
    }
    let steps: Vec<f64> = snapshots
        .windows(2)
        .map(|p| level_steps(&p[0].agents, &p[1].agents).get(level))
        .collect();
    Ok((0..=steps.len() - window)
        .find(|&k| steps[k..k + window].iter().all(|s| *s < tol))
        .map(|k| snapshots[k].t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{
        HighwayConfig, Learner, MatrixGameConfig, MatrixGameName, Scenario, ScenarioConfig, ToyConfig,
    };

    fn scenarios() -> Vec<Scenario> {
        [
            ScenarioConfig::Toy(ToyConfig::default()),
            ScenarioConfig::MatrixGame(MatrixGameConfig::new(
                MatrixGameName::PrisonersDilemma,
                Learner::FictitiousPlay,
                5.0,
                0.1,
            )),
            ScenarioConfig::HighwayMerge(HighwayConfig::default()),
        ]
        .into_iter()
        .map(|c| Scenario::build(c).unwrap())
        .collect()
    }

    #[test]
    fn flatten_round_trips() {
        for sc in scenarios() {
            let x = flatten(&sc.initial);
            assert_eq!(layout(&sc.initial).len(), x.len());
            let back = unflatten(&sc.initial, &x).unwrap();
            for (a, b) in back.iter().zip(&sc.initial) {
                assert_eq!(a.theta, b.theta);
                for (p, q) in a.belief.values().iter().zip(b.belief.values()) {
                    assert!((p - q).abs() < 1e-15);
                }
            }
            assert!(unflatten(&sc.initial, &x[..x.len().saturating_sub(1)]).is_err() || x.is_empty());
        }
    }

    #[test]
    fn pd_defection_has_zero_gap_and_cooperation_does_not() {
        let sc = &scenarios()[1];
        let d = vec![vec![0.0, 1.0]];
        let c = vec![vec![1.0, 0.0]];
        let g = &sc.game;
        assert_eq!(brgap(g, &[d.clone(), d.clone()], 0).unwrap(), 0.0);
        // cooperating against a defector forgoes 1 per period: 1 / (1 - 0.95) = 20
        let gap = brgap(g, &[c, d], 0).unwrap();
        assert!((gap - 20.0).abs() < 1e-8, "{gap}");
    }

    #[test]
    fn verdicts() {
        let r = |v| Residual { value: v, std_error: 0.0 };
        let tol = ToleranceConfig::default();
        let full = check_mie(vec![r(0.0)], vec![r(1e-4)], vec![0.0], tol).unwrap();
        assert_eq!(full.verdict, Verdict::Full);
        let marginal = check_mie(vec![r(0.5)], vec![r(0.0)], vec![0.0], tol).unwrap();
        assert_eq!(marginal.verdict, Verdict::Marginal);
        assert_eq!(marginal.satisfied, vec!["ii", "iii"]);
        let only_behavioral = check_mie(vec![r(1.0)], vec![r(0.5)], vec![0.0], tol).unwrap();
        assert_eq!(only_behavioral.verdict, Verdict::None);
        let bad = ToleranceConfig { eps_neural: 0.0, ..tol };
        assert!(check_mie(vec![], vec![], vec![], bad).is_err());
        let short = ToleranceConfig { window: 1, ..tol };
        assert!(short.validate().is_err());
    }

    #[test]
    fn identical_states_have_zero_steps() {
        let sc = &scenarios()[2];
        let s = level_steps(&sc.initial, &sc.initial);
        assert_eq!((s.neural, s.cognitive, s.behavioral), (0.0, 0.0, 0.0));
    }
}
