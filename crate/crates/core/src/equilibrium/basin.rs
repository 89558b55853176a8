use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::scenarios::{Scenario, ScenarioConfig};
use crate::sim::{RunConfig, Rollout};

use super::meanfield::{find_fixed_point, Expectation, FixedPointOptions, MeanField, StateWeighting};
use super::{flatten, unflatten};

/// One grid axis over a numeric scenario parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let h = (self.max - self.min) / (self.steps - 1) as f64;
        (0..self.steps).map(|k| self.min + k as f64 * h).collect()
    }

    pub fn spacing(&self) -> f64 {
        if self.steps <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.steps - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BasinMethod {
    /// Iterate the mean-field map from each cell's initial state.
    FixedPoint {
        #[serde(default)]
        options: FixedPointOptions,
        #[serde(default = "exact")]
        expectation: Expectation,
        #[serde(default)]
        weighting: StateWeighting,
    },
    /// Simulate each cell and watch the scenario observables settle.
    Rollout {
        horizon: u64,
        #[serde(default)]
        seed: u64,
        /// Ticks at the end of the run over which the observables must stay within `tol`.
        #[serde(default = "window")]
        window: u64,
        #[serde(default = "tol")]
        tol: f64,
        #[serde(default = "blowup")]
        divergence: f64,
    },
}

fn exact() -> Expectation {
    Expectation::Exact
}
fn window() -> u64 {
    100
}
fn tol() -> f64 {
    1e-3
}
fn blowup() -> f64 {
    1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinOptions {
    pub method: BasinMethod,
    /// Endpoints closer than this (max-norm on observables) share an attractor label.
    #[serde(default = "merge")]
    pub merge_tol: f64,
}

fn merge() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Converged,
    Diverged,
    /// Neither settled nor blew up within the budget.
    Undetermined,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinCell {
    pub coords: Vec<f64>,
    pub status: CellStatus,
    pub attractor: Option<usize>,
    /// Scenario observables at the end of the run.
    pub endpoint: Vec<f64>,
    /// Iterations or ticks until the endpoint was reached.
    pub convergence_time: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attractor {
    pub id: usize,
    pub point: Vec<f64>,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinMap {
    pub axes: Vec<Axis>,
    /// Row-major over the axes, last axis fastest.
    pub cells: Vec<BasinCell>,
    pub attractors: Vec<Attractor>,
}

const MAX_CELLS: usize = 1_000_000;

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn failed(coords: Vec<f64>, status: CellStatus, e: &MieError) -> BasinCell {
    BasinCell {
        coords,
        status,
        attractor: None,
        endpoint: vec![],
        convergence_time: 0,
        error: Some(e.to_string()),
    }
}

fn run_cell(scenario: &Scenario, coords: Vec<f64>, method: &BasinMethod) -> Result<BasinCell> {
    let numerical = |e: &MieError| matches!(e.root(), MieError::Numerical { .. });
    match method {
        BasinMethod::FixedPoint {
            options,
            expectation,
            weighting,
        } => {
            let field = MeanField::new(scenario, *expectation, *weighting)?;
            let res = match find_fixed_point(&field, &flatten(&scenario.initial), options) {
                Ok(r) => r,
                Err(e) if numerical(&e) => return Ok(failed(coords, CellStatus::Diverged, &e)),
                Err(e) => return Err(e),
            };
            let endpoint = scenario.observables(&unflatten(&scenario.initial, &res.point)?);
            let status = if res.converged {
                CellStatus::Converged
            } else if res.diverged {
                CellStatus::Diverged
            } else {
                CellStatus::Undetermined
            };
            Ok(BasinCell {
                coords,
                status,
                attractor: None,
                endpoint,
                convergence_time: res.iterations as u64,
                error: None,
            })
        }
        BasinMethod::Rollout {
            horizon,
            seed,
            window,
            tol,
            divergence,
        } => {
            let mut sim = Rollout::new(scenario, &RunConfig::new(*seed, *horizon));
            let mut traj = Vec::with_capacity(*horizon as usize);
            for _ in 0..*horizon {
                if let Err(e) = sim.tick() {
                    if numerical(&e) {
                        return Ok(failed(coords, CellStatus::Diverged, &e));
                    }
                    return Err(e);
                }
                let obs = scenario.observables(&sim.agents);
                if obs.iter().any(|v| !v.is_finite() || v.abs() > *divergence) {
                    return Ok(BasinCell {
                        coords,
                        status: CellStatus::Diverged,
                        attractor: None,
                        endpoint: obs,
                        convergence_time: traj.len() as u64,
                        error: None,
                    });
                }
                traj.push(obs);
            }
            let end = traj.last().cloned().unwrap_or_default();
            let settled_from = traj
                .iter()
                .rposition(|o| max_dist(o, &end) >= *tol)
                .map_or(0, |k| k + 1);
            let last = traj.len() as u64;
            let status = if last - (settled_from as u64) >= (*window).min(last) {
                CellStatus::Converged
            } else {
                CellStatus::Undetermined
            };
            Ok(BasinCell {
                coords,
                status,
                attractor: None,
                endpoint: end,
                convergence_time: settled_from as u64,
                error: None,
            })
        }
    }
}

/// Runs every grid cell from the scenario with the axis keys overridden, then labels
/// converged endpoints by attractor.
pub fn basin_map(base: &ScenarioConfig, axes: &[Axis], opts: &BasinOptions) -> Result<BasinMap> {
    if axes.is_empty() || axes.len() > 3 {
        return Err(MieError::usage(format!("basin map needs 1 to 3 axes, got {}", axes.len())));
    }
    for a in axes {
        if a.steps == 0 || !a.min.is_finite() || !a.max.is_finite() || a.max < a.min {
            return Err(MieError::usage(format!("axis `{}` has an invalid range", a.key)));
        }
    }
    if !(opts.merge_tol >= 0.0) {
        return Err(MieError::usage("merge tolerance must be non-negative"));
    }
    let total: usize = axes.iter().map(|a| a.steps).product();
    if total > MAX_CELLS {
        return Err(MieError::usage(format!("{total} cells exceed the limit {MAX_CELLS}")));
    }
    let values: Vec<Vec<f64>> = axes.iter().map(Axis::values).collect();
    let coords_of = |mut k: usize| -> Vec<f64> {
        let mut c = vec![0.0; axes.len()];
        for d in (0..axes.len()).rev() {
            c[d] = values[d][k % axes[d].steps];
            k /= axes[d].steps;
        }
        c
    };
    // configuration errors surface before any cell runs
    let scenarios: Vec<Scenario> = (0..total)
        .map(|k| {
            let coords = coords_of(k);
            let mut cfg = base.clone();
            for (a, v) in axes.iter().zip(&coords) {
                cfg = cfg.with_value(&a.key, *v)?;
            }
            Scenario::build(cfg)
        })
        .collect::<Result<_>>()?;
    let mut cells: Vec<BasinCell> = scenarios
        .par_iter()
        .enumerate()
        .map(|(k, sc)| {
            let coords = coords_of(k);
            run_cell(sc, coords.clone(), &opts.method).or_else(|e| Ok(failed(coords, CellStatus::Failed, &e)))
        })
        .collect::<Result<_>>()?;
    let mut attractors: Vec<Attractor> = Vec::new();
    for cell in cells.iter_mut().filter(|c| c.status == CellStatus::Converged) {
        let id = match attractors
            .iter()
            .position(|a| max_dist(&a.point, &cell.endpoint) <= opts.merge_tol)
        {
            Some(id) => id,
            None => {
                attractors.push(Attractor {
                    id: attractors.len(),
                    point: cell.endpoint.clone(),
                    cells: 0,
                });
                attractors.len() - 1
            }
        };
        attractors[id].cells += 1;
        cell.attractor = Some(id);
    }
    Ok(BasinMap {
        axes: axes.to_vec(),
        cells,
        attractors,
    })
}
