//! Rollouts of the coupled system, perturbations, interaction logs and replay.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    check_simplex, joint_step_phi, AgentSpec, Emission, MultilevelAgentState, ObservationMask,
    OperatorPeriods, StepRecord,
};
use crate::error::{MieError, Result};
use crate::game::TabularMarkovGame;
use crate::rng::{draw, RngStreams};
use crate::scenarios::{Scenario, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub horizon: u64,
    #[serde(default = "default_cadence")]
    pub snapshot_cadence: u64,
    /// Restart from the initial distribution after entering an absorbing state.
    #[serde(default)]
    pub reset_absorbing: bool,
    /// Overrides every agent's operator periods when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<OperatorPeriods>,
}

fn default_cadence() -> u64 {
    10
}

impl RunConfig {
    pub fn new(seed: u64, horizon: u64) -> Self {
        RunConfig {
            seed,
            horizon,
            snapshot_cadence: default_cadence(),
            reset_absorbing: false,
            periods: None,
        }
    }

    pub fn with_cadence(mut self, cadence: u64) -> Self {
        self.snapshot_cadence = cadence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(MieError::usage("horizon must be >= 1"));
        }
        if self.snapshot_cadence == 0 {
            return Err(MieError::usage("snapshot_cadence must be >= 1"));
        }
        if let Some(p) = &self.periods {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationTarget {
    RewardContingency,
    Policy,
    Belief,
    NeuralParams,
    ObservationMask,
    DecoderMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Delta {
    /// `x + magnitude * values`
    Additive { values: Vec<f64> },
    /// `x + magnitude * (values - x)`; magnitude 1 replaces outright.
    Replace { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub t: u64,
    pub target: PerturbationTarget,
    #[serde(default)]
    pub agent: usize,
    /// Ignored for `observation_mask`, which hides all observation fields.
    #[serde(default)]
    pub delta: Option<Delta>,
    #[serde(default = "one")]
    pub magnitude: f64,
}

fn one() -> f64 {
    1.0
}

fn apply_delta(x: &mut [f64], delta: &Delta, magnitude: f64) -> Result<()> {
    let (values, replace) = match delta {
        Delta::Additive { values } => (values, false),
        Delta::Replace { values } => (values, true),
    };
    // a single value broadcasts
    let len = x.len();
    let get = |k: usize| -> Result<f64> {
        match values.len() {
            1 => Ok(values[0]),
            n if n == len => Ok(values[k]),
            n => Err(MieError::usage(format!(
                "perturbation payload has {n} values, target has {len}"
            ))),
        }
    };
    for k in 0..len {
        let v = get(k)?;
        x[k] = if replace {
            x[k] + magnitude * (v - x[k])
        } else {
            x[k] + magnitude * v
        };
    }
    Ok(())
}

/// Clips negatives and renormalises, leaving exact distributions untouched.
fn project_simplex(p: &mut [f64]) -> Result<()> {
    if check_simplex(p).is_ok() {
        return Ok(());
    }
    for v in p.iter_mut() {
        *v = v.max(0.0);
    }
    let z: f64 = p.iter().sum();
    if !(z > 0.0) {
        return Err(MieError::usage("perturbation leaves a distribution with no mass"));
    }
    for v in p.iter_mut() {
        *v /= z;
    }
    Ok(())
}

impl PerturbationSpec {
    pub fn validate(&self, scenario: &Scenario, run: &RunConfig) -> Result<()> {
        if self.t >= run.horizon {
            return Err(MieError::usage(format!(
                "perturbation tick {} is not before the horizon {}",
                self.t, run.horizon
            )));
        }
        if self.agent >= scenario.num_agents() {
            return Err(MieError::usage(format!("perturbation agent {} out of range", self.agent)));
        }
        if !self.magnitude.is_finite() {
            return Err(MieError::usage("perturbation magnitude must be finite"));
        }
        if self.target != PerturbationTarget::ObservationMask && self.delta.is_none() {
            return Err(MieError::usage("perturbation needs a delta payload"));
        }
        if self.target == PerturbationTarget::DecoderMapping
            && !matches!(scenario.specs[self.agent].emission, Emission::Decode { .. })
        {
            return Err(MieError::usage(format!(
                "agent {} has no decoder mapping to perturb",
                self.agent
            )));
        }
        Ok(())
    }
}

/// One running copy of a scenario.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub game: TabularMarkovGame,
    pub specs: Vec<AgentSpec>,
    pub agents: Vec<MultilevelAgentState>,
    pub masks: Vec<ObservationMask>,
    pub state: usize,
    pub t: u64,
    pub rngs: RngStreams,
    pub reset_absorbing: bool,
}

impl Rollout {
    pub fn new(scenario: &Scenario, run: &RunConfig) -> Self {
        Self::from_agents(scenario, run, scenario.initial.clone())
    }

    pub fn from_agents(scenario: &Scenario, run: &RunConfig, agents: Vec<MultilevelAgentState>) -> Self {
        let n = scenario.num_agents();
        let mut rngs = RngStreams::new(run.seed, n);
        let state = draw(&mut rngs.env, scenario.game.initial_dist());
        let mut specs = scenario.specs.clone();
        if let Some(p) = run.periods {
            for s in specs.iter_mut() {
                s.periods = p;
            }
        }
        Rollout {
            game: scenario.game.clone(),
            specs,
            agents,
            masks: vec![ObservationMask::NONE; n],
            state,
            t: 0,
            rngs,
            reset_absorbing: run.reset_absorbing,
        }
    }

    /// One tick; the returned record's `state` is the state the tick started from.
    pub fn tick(&mut self) -> Result<StepRecord> {
        let t = self.t;
        let (next, agents, record) = joint_step_phi(
            &self.game,
            &self.specs,
            &self.agents,
            self.state,
            t,
            &self.masks,
            &mut self.rngs,
        )
        .map_err(|e| e.at_tick(t))?;
        self.agents = agents;
        self.state = if self.reset_absorbing && self.game.is_absorbing(next) {
            draw(&mut self.rngs.env, self.game.initial_dist())
        } else {
            next
        };
        self.t += 1;
        Ok(record)
    }

    /// Applies a perturbation between ticks. Consumes no random numbers.
    pub fn perturb(&mut self, p: &PerturbationSpec) -> Result<()> {
        let i = p.agent;
        let agent = self
            .agents
            .get_mut(i)
            .ok_or_else(|| MieError::usage(format!("perturbation agent {i} out of range")))?;
        let delta = p.delta.as_ref();
        let need = || delta.ok_or_else(|| MieError::usage("perturbation needs a delta payload"));
        match p.target {
            PerturbationTarget::ObservationMask => {
                if p.magnitude != 0.0 {
                    self.masks[i] = ObservationMask::ALL;
                }
            }
            PerturbationTarget::Belief => {
                let categorical = agent.belief.probs().is_some();
                let values = agent.belief.values_mut();
                apply_delta(values, need()?, p.magnitude)?;
                if categorical {
                    project_simplex(values)?;
                }
            }
            PerturbationTarget::NeuralParams | PerturbationTarget::DecoderMapping => {
                apply_delta(&mut agent.theta.values, need()?, p.magnitude)?;
            }
            PerturbationTarget::Policy => {
                let mut flat: Vec<f64> = agent.policy.rows().iter().flat_map(|r| r.iter().copied()).collect();
                apply_delta(&mut flat, need()?, p.magnitude)?;
                let mut k = 0;
                for row in agent.policy.rows_mut() {
                    let n = row.len();
                    row.copy_from_slice(&flat[k..k + n]);
                    project_simplex(row)?;
                    k += n;
                }
            }
            PerturbationTarget::RewardContingency => {
                let d = need()?.clone();
                let mut flat: Vec<f64> = self.game.spec().rewards[i].iter().flatten().copied().collect();
                apply_delta(&mut flat, &d, p.magnitude)?;
                self.game = self.game.map_rewards(i, |k, _| flat[k])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub scenario: ScenarioConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    pub config_hash: String,
    pub seed: u64,
    pub num_agents: usize,
    pub metric_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: u64,
    pub state: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_state: usize,
    #[serde(default, skip_serializing_if = "all_empty")]
    pub signals: Vec<Vec<f64>>,
    /// Per-agent masks; omitted when nothing is masked.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<ObservationMask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<f64>,
}

fn all_empty(s: &[Vec<f64>]) -> bool {
    s.iter().all(|v| v.is_empty())
}

/// Agent states before tick `t` (so the snapshot at `t = 0` is the initial condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: u64,
    pub state: usize,
    pub agents: Vec<MultilevelAgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Perturbation(PerturbationSpec),
    Snapshot(Snapshot),
    Tick(TickRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
    pub snapshots: Vec<Snapshot>,
}

/// Hash over the scenario, the run settings other than the seed, and the perturbation.
pub fn config_hash(scenario: &ScenarioConfig, run: &RunConfig, perturbation: Option<&PerturbationSpec>) -> String {
    let mut run = run.clone();
    run.seed = 0;
    canonical_hash(&serde_json::json!({
        "scenario": scenario,
        "run": run,
        "perturbation": perturbation,
    }))
}

/// SHA-256 of the compact JSON form. serde_json maps are ordered, so equal values hash equally.
pub fn canonical_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn snapshot_due(t: u64, run: &RunConfig) -> bool {
    t % run.snapshot_cadence == 0
}

pub fn rollout(scenario: &Scenario, run: &RunConfig) -> Result<InteractionLog> {
    rollout_with_perturbation(scenario, run, None)
}

pub fn rollout_with_perturbation(
    scenario: &Scenario,
    run: &RunConfig,
    perturbation: Option<&PerturbationSpec>,
) -> Result<InteractionLog> {
    run.validate()?;
    if let Some(p) = perturbation {
        p.validate(scenario, run)?;
    }
    let header = LogHeader {
        scenario: scenario.config.clone(),
        run: run.clone(),
        perturbation: perturbation.cloned(),
        config_hash: config_hash(&scenario.config, run, perturbation),
        seed: run.seed,
        num_agents: scenario.num_agents(),
        metric_names: scenario.metric_names(),
    };
    let mut sim = Rollout::new(scenario, run);
    let cap = (run.horizon / run.snapshot_cadence + 2) as usize;
    let mut snapshots = Vec::with_capacity(cap);
    let mut ticks = Vec::with_capacity(run.horizon as usize);
    for t in 0..run.horizon {
        if let Some(p) = perturbation.filter(|p| p.t == t) {
            sim.perturb(p).map_err(|e| e.at_tick(t))?;
        }
        if snapshot_due(t, run) {
            snapshots.push(Snapshot {
                t,
                state: sim.state,
                agents: sim.agents.clone(),
            });
        }
        let before = sim.agents.clone();
        let masks = sim.masks.clone();
        let record = sim.tick()?;
        let metrics = scenario.metrics(&before, &record);
        ticks.push(TickRecord {
            t,
            state: record.state,
            actions: record.actions,
            rewards: record.rewards,
            next_state: record.next_state,
            // all-empty signals are not written, so keep the in-memory form the same
            signals: if all_empty(&record.signals) { Vec::new() } else { record.signals },
            masks: if masks.iter().all(|m| *m == ObservationMask::NONE) {
                Vec::new()
            } else {
                masks
            },
            metrics,
        });
    }
    if snapshot_due(run.horizon, run) {
        snapshots.push(Snapshot {
            t: run.horizon,
            state: sim.state,
            agents: sim.agents.clone(),
        });
    }
    Ok(InteractionLog {
        header,
        ticks,
        snapshots,
    })
}

impl InteractionLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&LogLine::Header(self.header.clone()))?;
        let mut snaps = self.snapshots.iter().peekable();
        let p = self.header.perturbation.as_ref();
        for tick in &self.ticks {
            if let Some(p) = p.filter(|p| p.t == tick.t) {
                line(&LogLine::Perturbation(p.clone()))?;
            }
            while let Some(s) = snaps.next_if(|s| s.t <= tick.t) {
                line(&LogLine::Snapshot(s.clone()))?;
            }
            line(&LogLine::Tick(tick.clone()))?;
        }
        for s in snaps {
            line(&LogLine::Snapshot(s.clone()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
    }

    /// Parses and checks a log. Errors name the tick where the record stream breaks.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<InteractionLog> {
        let mut header = None;
        let mut ticks: Vec<TickRecord> = Vec::new();
        let mut snapshots: Vec<Snapshot> = Vec::new();
        let next_tick = |ticks: &[TickRecord]| ticks.last().map_or(0, |t| t.t + 1);
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| {
                MieError::Log(format!(
                    "corrupt record at tick {} (line {}): {e}",
                    next_tick(&ticks),
                    n + 1
                ))
            })?;
            match parsed {
                LogLine::Header(h) => {
                    if n != 0 || header.is_some() {
                        return Err(MieError::Log(format!("unexpected header on line {}", n + 1)));
                    }
                    header = Some(h);
                }
                _ if header.is_none() => {
                    return Err(MieError::Log("log does not start with a header line".into()));
                }
                LogLine::Perturbation(_) => {}
                LogLine::Snapshot(s) => {
                    if snapshots.last().is_some_and(|p| p.t >= s.t) {
                        return Err(MieError::Log(format!("snapshot ticks not increasing at tick {}", s.t)));
                    }
                    snapshots.push(s);
                }
                LogLine::Tick(t) => {
                    let expected = next_tick(&ticks);
                    if t.t != expected {
                        return Err(MieError::Log(format!(
                            "tick {} found where tick {expected} was expected",
                            t.t
                        )));
                    }
                    ticks.push(t);
                }
            }
        }
        let header = header.ok_or_else(|| MieError::Log("empty log".into()))?;
        if (ticks.len() as u64) < header.run.horizon {
            return Err(MieError::Log(format!(
                "log truncated at tick {} of {}",
                ticks.len(),
                header.run.horizon
            )));
        }
        Ok(InteractionLog {
            header,
            ticks,
            snapshots,
        })
    }

    pub fn snapshot_at(&self, t: u64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }

    /// Scalar series: tick, scenario metrics, then every agent's reward.
    pub fn series_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={}, seed={}\n",
            self.header.config_hash, self.header.seed
        );
        let mut cols = vec!["t".to_string()];
        cols.extend(self.header.metric_names.iter().cloned());
        cols.extend((0..self.header.num_agents).map(|i| format!("reward_{i}")));
        out.push_str(&cols.join(","));
        out.push('\n');
        for tick in &self.ticks {
            let mut row = vec![tick.t.to_string()];
            row.extend(tick.metrics.iter().map(|v| fmt_num(*v)));
            row.extend(tick.rewards.iter().map(|v| fmt_num(*v)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip representation, in exponent form for very large or small values.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub t: u64,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ok: bool,
    pub ticks_checked: u64,
    pub first_divergence: Option<Divergence>,
}

/// Re-simulates a log and compares it record by record.
///
/// When `scenario` is given its hash must match the log's. `seed` overrides the seed
/// stored in the log.
pub fn replay(log: &InteractionLog, scenario: Option<&ScenarioConfig>, seed: Option<u64>) -> Result<ReplayReport> {
    let h = &log.header;
    let config = scenario.unwrap_or(&h.scenario);
    let actual = config_hash(config, &h.run, h.perturbation.as_ref());
    if actual != h.config_hash {
        return Err(MieError::HashMismatch {
            expected: h.config_hash.clone(),
            actual,
        });
    }
    let built = Scenario::build(config.clone())?;
    let mut run = h.run.clone();
    run.seed = seed.unwrap_or(h.seed);
    let fresh = rollout_with_perturbation(&built, &run, h.perturbation.as_ref())?;
    let mut snaps = fresh.snapshots.iter();
    for (k, (a, b)) in log.ticks.iter().zip(&fresh.ticks).enumerate() {
        let field = if a.state != b.state {
            Some("state")
        } else if a.actions != b.actions {
            Some("actions")
        } else if a.rewards != b.rewards {
            Some("rewards")
        } else if a.next_state != b.next_state {
            Some("next_state")
        } else if a.signals != b.signals {
            Some("signals")
        } else if a.metrics != b.metrics {
            Some("metrics")
        } else {
            None
        };
        if let Some(field) = field {
            return Ok(ReplayReport {
                ok: false,
                ticks_checked: k as u64,
                first_divergence: Some(Divergence {
                    t: a.t,
                    field: field.into(),
                }),
            });
        }
        if let Some(s) = log.snapshot_at(a.t) {
            let mine = snaps.find(|x| x.t == a.t);
            if mine != Some(s) {
                return Ok(ReplayReport {
                    ok: false,
                    ticks_checked: k as u64,
                    first_divergence: Some(Divergence {
                        t: a.t,
                        field: "snapshot".into(),
                    }),
                });
            }
        }
    }
    Ok(ReplayReport {
        ok: true,
        ticks_checked: log.ticks.len() as u64,
        first_divergence: None,
    })
}
