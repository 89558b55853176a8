use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    belief_update_f, build_observations, emit_signals, neural_signal, neural_update_g, sample_joint_action,
    update_agents, MultilevelAgentState, Observation, ObservationMask,
};
use crate::error::{MieError, Result};
use crate::game::JointAction;
use crate::rng::{derive_seed, draw, RngStreams};
use crate::scenarios::Scenario;

use super::{flatten, unflatten};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Expectation {
    /// Enumerates states, joint actions and successors. Needs deterministic emissions.
    Exact,
    /// Averages `samples` draws; sample `k` uses its own seed derived from `seed`, so
    /// repeated evaluations share random numbers.
    MonteCarlo { samples: usize, seed: u64 },
}

/// State distribution the expectation is taken over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateWeighting {
    /// Stationary distribution of the chain induced by the current policies.
    #[default]
    Stationary,
    Initial,
    /// Normalised discounted occupancy from the initial distribution.
    Occupancy,
}

/// Which operators the map applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Levels {
    All,
    Cognitive,
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub value: f64,
    /// Monte Carlo standard error; zero for exact expectations.
    pub std_error: f64,
}

/// Expected one-step operator `x -> E[Phi(x)]` on flattened joint states.
#[derive(Debug, Clone)]
pub struct MeanField<'a> {
    pub scenario: &'a Scenario,
    pub template: Vec<MultilevelAgentState>,
    pub expectation: Expectation,
    pub weighting: StateWeighting,
}

impl<'a> MeanField<'a> {
    pub fn new(scenario: &'a Scenario, expectation: Expectation, weighting: StateWeighting) -> Result<Self> {
        match expectation {
            Expectation::Exact => {
                if let Some(i) = scenario.specs.iter().position(|s| s.emission.is_stochastic()) {
                    return Err(MieError::usage(format!(
                        "agent {i} emits noisy signals; use the Monte Carlo expectation"
                    )));
                }
            }
            Expectation::MonteCarlo { samples, .. } => {
                if samples == 0 {
                    return Err(MieError::usage("Monte Carlo expectation needs at least one sample"));
                }
            }
        }
        Ok(MeanField {
            scenario,
            template: scenario.initial.clone(),
            expectation,
            weighting,
        })
    }

    pub fn dim(&self) -> usize {
        flatten(&self.template).len()
    }

    pub fn state_weights(&self, agents: &[MultilevelAgentState]) -> Result<Vec<f64>> {
        let game = &self.scenario.game;
        let mu0 = game.initial_dist().to_vec();
        if self.weighting == StateWeighting::Initial {
            return Ok(mu0);
        }
        let n = game.num_states();
        // induced chain P_pi
        let mut p = DMatrix::<f64>::zeros(n, n);
        for s in 0..n {
            let dists: Vec<&[f64]> = agents.iter().map(|a| a.policy.distribution(s, &a.belief)).collect();
            for j in 0..game.num_joint() {
                let joint = game.decode_joint(j);
                let pj: f64 = joint.iter().enumerate().map(|(i, &a)| dists[i][a]).product();
                if pj == 0.0 {
                    continue;
                }
                for (next, &q) in game.transition_row(s, j).iter().enumerate() {
                    p[(s, next)] += pj * q;
                }
            }
        }
        let mu = match self.weighting {
            StateWeighting::Occupancy => {
                let g = game.discount();
                let m = (DMatrix::identity(n, n) - p * g).transpose();
                let rhs = DVector::from_vec(mu0) * (1.0 - g);
                m.lu()
                    .solve(&rhs)
                    .ok_or_else(|| MieError::numerical("occupancy system is singular", None))?
                    .iter()
                    .copied()
                    .collect()
            }
            _ => {
                // power iteration on the lazy chain, which has the same stationary
                // distributions and no periodicity
                let lazy = (p + DMatrix::identity(n, n)) * 0.5;
                let mut v = DVector::from_vec(mu0).transpose();
                let mut done = false;
                for _ in 0..200_000 {
                    let next = &v * &lazy;
                    let change: f64 = (&next - &v).iter().map(|d| d.abs()).sum();
                    v = next;
                    if change < 1e-14 {
                        done = true;
                        break;
                    }
                }
                if !done {
                    return Err(MieError::numerical("stationary distribution did not converge", None));
                }
                v.iter().copied().collect::<Vec<f64>>()
            }
        };
        let z: f64 = mu.iter().sum();
        Ok(mu.into_iter().map(|m| (m / z).max(0.0)).collect())
    }

    /// Calls `visit(weight, observations)` for every outcome of one tick from `agents`.
    fn for_each_outcome(
        &self,
        agents: &[MultilevelAgentState],
        mut visit: impl FnMut(f64, &[Observation]) -> Result<()>,
    ) -> Result<()> {
        let sc = self.scenario;
        let game = &sc.game;
        let n = agents.len();
        let masks = vec![ObservationMask::NONE; n];
        let mu = self.state_weights(agents)?;
        match self.expectation {
            Expectation::Exact => {
                // emissions are deterministic here, so these streams are never drawn from
                let mut idle = RngStreams::new(0, n);
                for (s, &ms) in mu.iter().enumerate() {
                    if ms == 0.0 {
                        continue;
                    }
                    let signals = emit_signals(&sc.specs, agents, s, &mut idle)?;
                    let dists: Vec<&[f64]> = agents.iter().map(|a| a.policy.distribution(s, &a.belief)).collect();
                    for j in 0..game.num_joint() {
                        let joint = JointAction(game.decode_joint(j));
                        let pj: f64 = joint.0.iter().enumerate().map(|(i, &a)| dists[i][a]).product();
                        if pj == 0.0 {
                            continue;
                        }
                        let rewards = game.rewards_at(s, j);
                        for (next, &q) in game.transition_row(s, j).iter().enumerate() {
                            if q == 0.0 {
                                continue;
                            }
                            let obs = build_observations(game, (s, &joint, &rewards, next), &signals, &masks);
                            visit(ms * pj * q, &obs)?;
                        }
                    }
                }
            }
            Expectation::MonteCarlo { samples, seed } => {
                let w = 1.0 / samples as f64;
                for k in 0..samples {
                    let mut rngs = RngStreams::new(derive_seed(seed, k as u64), n);
                    let s = draw(&mut rngs.env, &mu);
                    let joint = sample_joint_action(agents, s, &mut rngs)?;
                    let (next, rewards) = game.step(s, &joint, &mut rngs.env)?;
                    let signals = emit_signals(&sc.specs, agents, s, &mut rngs)?;
                    let obs = build_observations(game, (s, &joint, &rewards, next), &signals, &masks);
                    visit(w, &obs)?;
                }
            }
        }
        Ok(())
    }

    fn update(
        &self,
        agents: &[MultilevelAgentState],
        obs: &[Observation],
        levels: Levels,
    ) -> Result<Vec<MultilevelAgentState>> {
        let sc = self.scenario;
        match levels {
            Levels::All => update_agents(&sc.game, &sc.specs, agents, obs, 0),
            Levels::Cognitive => agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let mut next = a.clone();
                    next.belief = belief_update_f(&sc.specs[i].belief_rule, &a.belief, &obs[i]).map_err(|e| e.for_agent(i))?;
                    Ok(next)
                })
                .collect(),
            Levels::Neural => agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let mut next = a.clone();
                    if let Some(sig) = neural_signal(&sc.specs[i].neural_rule, &sc.game, i, a, &obs[i]) {
                        next.theta = neural_update_g(&a.theta, &sig).map_err(|e| e.for_agent(i))?;
                    }
                    Ok(next)
                })
                .collect(),
        }
    }

    /// `E[flatten(Phi(unflatten(x)))]`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let agents = unflatten(&self.template, x)?;
        let mut acc = vec![0.0; x.len()];
        self.for_each_outcome(&agents, |w, obs| {
            let next = flatten(&self.update(&agents, obs, Levels::All)?);
            for (a, v) in acc.iter_mut().zip(next) {
                *a += w * v;
            }
            Ok(())
        })?;
        Ok(acc)
    }

    /// Per-agent size of the expected one-level update: theta moves in l2 for
    /// `Levels::Neural`, beliefs in l1 for `Levels::Cognitive`.
    pub fn residuals(&self, agents: &[MultilevelAgentState], levels: Levels) -> Result<Vec<Residual>> {
        if let Expectation::MonteCarlo { samples, .. } = self.expectation {
            if samples < 10 {
                return Err(MieError::usage(format!(
                    "residual estimates need at least 10 Monte Carlo samples, got {samples}"
                )));
            }
        }
        let block = |a: &MultilevelAgentState| -> Vec<f64> {
            match levels {
                Levels::Neural => a.theta.values.clone(),
                _ => {
                    let mut v = Vec::new();
                    let mut b = Some(&a.belief);
                    while let Some(x) = b {
                        v.extend_from_slice(x.values());
                        b = x.nested.as_deref();
                    }
                    v
                }
            }
        };
        let levels = if levels == Levels::All { Levels::Cognitive } else { levels };
        let n = agents.len();
        let base: Vec<Vec<f64>> = agents.iter().map(block).collect();
        let mut draws: Vec<(f64, Vec<Vec<f64>>)> = Vec::new();
        self.for_each_outcome(agents, |w, obs| {
            let next = self.update(agents, obs, levels)?;
            let deltas = (0..n)
                .map(|i| block(&next[i]).iter().zip(&base[i]).map(|(a, b)| a - b).collect())
                .collect();
            draws.push((w, deltas));
            Ok(())
        })?;
        let norm = |v: &[f64]| -> f64 {
            match levels {
                Levels::Neural => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                _ => v.iter().map(|x| x.abs()).sum(),
            }
        };
        Ok((0..n)
            .map(|i| {
                let mut mean = vec![0.0; base[i].len()];
                for (w, d) in &draws {
                    for (m, v) in mean.iter_mut().zip(&d[i]) {
                        *m += w * v;
                    }
                }
                let std_error = match self.expectation {
                    Expectation::Exact => 0.0,
                    Expectation::MonteCarlo { samples, .. } => {
                        let m = samples as f64;
                        let spread: f64 = draws
                            .iter()
                            .map(|(_, d)| d[i].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                            .sum();
                        (spread / (m * (m - 1.0))).sqrt()
                    }
                };
                Residual {
                    value: norm(&mean),
                    std_error,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointOptions {
    /// Relaxation weight in (0, 1]: `x <- (1 - rho) x + rho Phi(x)`.
    #[serde(default = "one")]
    pub damping: f64,
    #[serde(default = "max_iter")]
    pub max_iterations: usize,
    #[serde(default = "fp_tol")]
    pub tol: f64,
    /// Step norm beyond which the iteration is declared divergent.
    #[serde(default = "blowup")]
    pub divergence: f64,
}

fn one() -> f64 {
    1.0
}
fn max_iter() -> usize {
    10_000
}
fn fp_tol() -> f64 {
    1e-8
}
fn blowup() -> f64 {
    1e6
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            damping: 1.0,
            max_iterations: max_iter(),
            tol: fp_tol(),
            divergence: blowup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    /// `|| Phi(x*) - x* ||_2` at the returned point.
    pub residual: f64,
    /// Step norm at every iteration.
    pub trace: Vec<f64>,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Damped iteration of the mean-field map from `x0`.
pub fn find_fixed_point(field: &MeanField, x0: &[f64], opts: &FixedPointOptions) -> Result<FixedPointResult> {
    let rho = opts.damping;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(MieError::usage(format!("damping must lie in (0, 1], got {rho}")));
    }
    if !(opts.tol > 0.0) {
        return Err(MieError::usage("fixed-point tolerance must be positive"));
    }
    let mut x = x0.to_vec();
    let mut fx = field.apply(&x)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let step = rho * l2(&fx, &x);
        trace.push(step);
        if !step.is_finite() || step > opts.divergence {
            diverged = true;
            break;
        }
        if step < opts.tol {
            converged = true;
            break;
        }
        for (a, f) in x.iter_mut().zip(&fx) {
            *a += rho * (f - *a);
        }
        iterations += 1;
        fx = match field.apply(&x) {
            Ok(v) => v,
            Err(e) if matches!(e.root(), MieError::Numerical { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
    }
    let residual = if diverged { f64::INFINITY } else { l2(&fx, &x) };
    Ok(FixedPointResult {
        point: x,
        iterations,
        converged,
        diverged,
        residual,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianEstimate {
    /// `matrix[r][c] = d Phi_r / d x_c`
    pub matrix: Vec<Vec<f64>>,
    /// Largest entrywise gap between step sizes `h` and `2h`, over three.
    pub error_estimate: f64,
    pub step: f64,
}

pub const MAX_JACOBIAN_DIM: usize = 200;

/// Central finite differences of the mean-field map at `x`.
pub fn mean_field_jacobian(field: &MeanField, x: &[f64], h: f64) -> Result<JacobianEstimate> {
    let d = x.len();
    if d > MAX_JACOBIAN_DIM {
        return Err(MieError::usage(format!(
            "state dimension {d} exceeds the Jacobian limit {MAX_JACOBIAN_DIM}"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(MieError::usage("finite-difference step must be positive"));
    }
    let column = |c: usize, step: f64| -> Result<Vec<f64>> {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[c] += step;
        down[c] -= step;
        let fu = field.apply(&up)?;
        let fd = field.apply(&down)?;
        let col: Vec<f64> = fu.iter().zip(&fd).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        if let Some(r) = col.iter().position(|v| !v.is_finite()) {
            return Err(MieError::numerical("non-finite Jacobian entry", Some(r * d + c)));
        }
        Ok(col)
    };
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .into_par_iter()
        .map(|c| Ok((column(c, h)?, column(c, 2.0 * h)?)))
        .collect::<Result<_>>()?;
    let mut matrix = vec![vec![0.0; d]; d];
    let mut err: f64 = 0.0;
    for (c, (fine, coarse)) in cols.iter().enumerate() {
        for r in 0..d {
            matrix[r][c] = fine[r];
            err = err.max((fine[r] - coarse[r]).abs() / 3.0);
        }
    }
    Ok(JacobianEstimate {
        matrix,
        error_estimate: err,
        step: h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    /// Some eigenvalues sit on the unit circle (within the band) and the rest inside.
    Neutral,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `[re, im]`, by decreasing modulus.
    pub eigenvalues: Vec<[f64; 2]>,
    /// Largest modulus among eigenvalues outside the neutral band.
    pub spectral_radius: f64,
    pub neutral_count: usize,
    pub classification: Stability,
}

/// Classifies a fixed point from its Jacobian; `band` is the half-width of the
/// annulus around the unit circle treated as neutral.
pub fn classify_stability(jacobian: &[Vec<f64>], band: f64) -> Result<StabilityReport> {
    let d = jacobian.len();
    if jacobian.iter().any(|r| r.len() != d) {
        return Err(MieError::usage("Jacobian is not square"));
    }
    if !(band >= 0.0) {
        return Err(MieError::usage("neutral band must be non-negative"));
    }
    if d == 0 {
        return Ok(StabilityReport {
            eigenvalues: vec![],
            spectral_radius: 0.0,
            neutral_count: 0,
            classification: Stability::Inconclusive,
        });
    }
    let m = DMatrix::from_fn(d, d, |r, c| jacobian[r][c]);
    let mut eig: Vec<[f64; 2]> = m.complex_eigenvalues().iter().map(|z| [z.re, z.im]).collect();
    let modulus = |z: &[f64; 2]| z[0].hypot(z[1]);
    eig.sort_by(|a, b| {
        modulus(b)
            .total_cmp(&modulus(a))
            .then(b[0].total_cmp(&a[0]))
            .then(b[1].total_cmp(&a[1]))
    });
    if eig.iter().any(|z| !z[0].is_finite() || !z[1].is_finite()) {
        return Ok(StabilityReport {
            eigenvalues: eig,
            spectral_radius: f64::NAN,
            neutral_count: 0,
            classification: Stability::Inconclusive,
        });
    }
    let neutral = |z: &[f64; 2]| (modulus(z) - 1.0).abs() <= band;
    let neutral_count = eig.iter().filter(|z| neutral(z)).count();
    let spectral_radius = eig
        .iter()
        .filter(|z| !neutral(z))
        .map(modulus)
        .fold(0.0, f64::max);
    let classification = if spectral_radius > 1.0 + band {
        Stability::Unstable
    } else if neutral_count > 0 {
        Stability::Neutral
    } else {
        Stability::Stable
    };
    Ok(StabilityReport {
        eigenvalues: eig,
        spectral_radius,
        neutral_count,
        classification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{toy_step, LinearConfig, ScenarioConfig, ToyConfig};

    fn toy(cfg: ToyConfig) -> Scenario {
        Scenario::build(ScenarioConfig::Toy(cfg)).unwrap()
    }

    #[test]
    fn toy_map_is_the_closed_form_step() {
        let cfg = ToyConfig::default();
        let sc = toy(cfg.clone());
        let mf = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
        let next = mf.apply(&[0.9, 0.1]).unwrap();
        let (x, y, _) = toy_step(0.9, 0.1, cfg.alpha_h, cfg.alpha_m);
        assert!((next[0] - x).abs() < 1e-15 && (next[1] - y).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_on_a_deterministic_system_matches_exact() {
        let sc = toy(ToyConfig::default());
        let exact = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
        let mc = MeanField::new(&sc, Expectation::MonteCarlo { samples: 16, seed: 3 }, StateWeighting::Stationary).unwrap();
        let a = exact.apply(&[0.7, 0.2]).unwrap();
        let b = mc.apply(&[0.7, 0.2]).unwrap();
        assert!(l2(&a, &b) < 1e-15);
        let r = mc.residuals(&sc.initial, Levels::Cognitive).unwrap();
        assert!(r.iter().all(|r| r.std_error < 1e-15));
    }

    #[test]
    fn residual_sample_floor() {
        let sc = toy(ToyConfig::default());
        let mc = MeanField::new(&sc, Expectation::MonteCarlo { samples: 9, seed: 3 }, StateWeighting::Stationary).unwrap();
        assert!(mc.residuals(&sc.initial, Levels::Cognitive).is_err());
    }

    #[test]
    fn fixed_point_start_returns_immediately() {
        let sc = toy(ToyConfig {
            x0: 0.4,
            y0: 0.4,
            ..ToyConfig::default()
        });
        let mf = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
        let r = find_fixed_point(&mf, &[0.4, 0.4], &FixedPointOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.point, vec![0.4, 0.4]);
    }

    #[test]
    fn damping_out_of_range_is_rejected() {
        let sc = toy(ToyConfig::default());
        let mf = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
        for rho in [0.0, 1.5] {
            let opts = FixedPointOptions {
                damping: rho,
                ..FixedPointOptions::default()
            };
            assert!(find_fixed_point(&mf, &[0.9, 0.1], &opts).is_err());
        }
    }

    #[test]
    fn linear_jacobian_is_the_matrix() {
        let a = vec![vec![0.5, 0.2], vec![-0.1, 0.8]];
        let sc = Scenario::build(ScenarioConfig::Linear(LinearConfig {
            matrix: a.clone(),
            x0: vec![0.3, -0.4],
        }))
        .unwrap();
        let mf = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
        let j = mean_field_jacobian(&mf, &[0.3, -0.4], 1e-5).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((j.matrix[r][c] - a[r][c]).abs() < 1e-9);
            }
        }
        assert!(j.error_estimate < 1e-8);
    }

    #[test]
    fn stability_classes() {
        let c = |m: Vec<Vec<f64>>| classify_stability(&m, 1e-6).unwrap().classification;
        assert_eq!(c(vec![vec![0.5, 0.0], vec![0.0, -0.9]]), Stability::Stable);
        assert_eq!(c(vec![vec![1.2, 0.0], vec![0.0, 0.1]]), Stability::Unstable);
        assert_eq!(c(vec![vec![1.0, 0.0], vec![0.0, 0.3]]), Stability::Neutral);
        // rotation by 90 degrees scaled by 0.9
        let r = classify_stability(&[vec![0.0, -0.9], vec![0.9, 0.0]], 1e-6).unwrap();
        assert!((r.spectral_radius - 0.9).abs() < 1e-12);
        assert_eq!(r.eigenvalues.len(), 2);
        assert!(classify_stability(&[vec![1.0]], -1.0).is_err());
    }
}
