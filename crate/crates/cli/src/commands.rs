use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use mie_core::equilibrium::{
    basin_map, classify_stability, distance_series, drift_detector, evaluate_mie, find_fixed_point,
    flatten, mean_field_jacobian, BasinMap, BasinMethod, CellStatus, EquilibriumReport, Expectation,
    FixedPointResult, JacobianEstimate, Level, MeanField, StabilityReport, MAX_JACOBIAN_DIM,
};
use mie_core::estimation::{
    belief_depth_comparison, belief_policy_divergence, cca_shared_subspace, convergence_report, empirical_policy,
    ConvergenceReport, DepthComparison, Divergence, EmpiricalPolicy,
};
use mie_core::scenarios::Scenario;
use mie_core::sim::{canonical_hash, config_hash, fmt_num, replay as replay_log, rollout_with_perturbation, InteractionLog};
use mie_core::MieError;
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepConfig};
use crate::output::{display, out_dir, Stamped, Writer};
use crate::{Common, Failure, EXIT_SWEEP};

fn required_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::config("--config is required"))?;
    Ok(ExperimentConfig::load(path)?.with_seed(common.seed))
}

fn optional_config(common: &Common) -> Result<Option<ExperimentConfig>, Failure> {
    match &common.config {
        Some(_) => required_config(common).map(Some),
        None => Ok(None),
    }
}

fn say(common: &Common, line: impl AsRef<str>) {
    if !common.quiet {
        println!("{}", line.as_ref());
    }
}

fn warn(common: &Common, line: impl AsRef<str>) {
    if !common.quiet {
        eprintln!("warning: {}", line.as_ref());
    }
}

fn opt(v: Option<impl ToString>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Reads a log and checks it against its own header, and against the config when given.
fn load_log(path: &Path, cfg: Option<&ExperimentConfig>) -> Result<InteractionLog, Failure> {
    let file = File::open(path).map_err(|e| Failure::data(format!("cannot open log {}: {e}", display(path))))?;
    let log = InteractionLog::read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::data(format!("{}: {e}", display(path))))?;
    let h = &log.header;
    let own = config_hash(&h.scenario, &h.run, h.perturbation.as_ref());
    if own != h.config_hash {
        return Err(Failure::data(format!(
            "{}: header hash {} does not match its contents ({own})",
            display(path),
            h.config_hash
        )));
    }
    if let Some(c) = cfg {
        let given = config_hash(&c.scenario, &c.run, c.perturbation.as_ref());
        if given != h.config_hash {
            return Err(Failure::data(format!(
                "config does not match log {}: config hash {given}, log hash {}",
                display(path),
                h.config_hash
            )));
        }
    }
    Ok(log)
}

fn rebuild(log: &InteractionLog) -> Result<Scenario, Failure> {
    Scenario::build(log.header.scenario.clone())
        .map_err(|e| Failure::data(format!("scenario in log header does not build: {e}")))
}

#[derive(Debug, Serialize)]
struct DriftTicks {
    neural: Option<u64>,
    cognitive: Option<u64>,
    behavioral: Option<u64>,
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    scenario: &'static str,
    horizon: u64,
    snapshots: usize,
    final_distance: Option<f64>,
    drift: DriftTicks,
    final_metrics: BTreeMap<String, f64>,
    total_rewards: Vec<f64>,
}

fn drift(log: &InteractionLog, cfg: &ExperimentConfig) -> Result<DriftTicks, Failure> {
    let tol = &cfg.tolerances;
    let detect = |level, eps| match drift_detector(&log.snapshots, level, eps, tol.window) {
        Ok(t) => Ok(t),
        Err(MieError::InsufficientData(_)) => Ok(None),
        Err(e) => Err(Failure::from(e)),
    };
    Ok(DriftTicks {
        neural: detect(Level::Neural, tol.eps_neural)?,
        cognitive: detect(Level::Cognitive, tol.eps_cognitive)?,
        behavioral: detect(Level::Behavioral, tol.eps_policy)?,
    })
}

fn distance_csv(hash: &str, seed: u64, series: &[(u64, f64)]) -> String {
    let mut out = format!("# config_hash={hash}, seed={seed}\nt,distance\n");
    for (t, e) in series {
        out.push_str(&format!("{t},{}\n", fmt_num(*e)));
    }
    out
}

pub fn simulate(common: &Common) -> Result<(), Failure> {
    let cfg = required_config(common)?;
    let scenario = Scenario::build(cfg.scenario.clone())?;
    let log = rollout_with_perturbation(&scenario, &cfg.run, cfg.perturbation.as_ref())?;
    let hash = log.header.config_hash.clone();
    let seed = log.header.seed;
    let mut w = Writer::new(out_dir(common, Some(&cfg))?);
    let mut jsonl = Vec::new();
    log.write_jsonl(&mut jsonl)?;
    w.text("log.jsonl", std::str::from_utf8(&jsonl).expect("JSON is UTF-8"))?;
    w.text("series.csv", &log.series_csv())?;

    let series = distance_series(&scenario.game, &log, &cfg.weights)?;
    w.text("distance.csv", &distance_csv(&hash, seed, &series))?;
    let final_metrics = match log.ticks.last() {
        Some(t) => log.header.metric_names.iter().cloned().zip(t.metrics.iter().copied()).collect(),
        None => BTreeMap::new(),
    };
    let mut total_rewards = vec![0.0; scenario.num_agents()];
    for t in &log.ticks {
        for (acc, r) in total_rewards.iter_mut().zip(&t.rewards) {
            *acc += r;
        }
    }
    let summary = SimulateSummary {
        scenario: cfg.scenario.kind(),
        horizon: cfg.run.horizon,
        snapshots: log.snapshots.len(),
        final_distance: series.last().map(|p| p.1),
        drift: drift(&log, &cfg)?,
        final_metrics,
        total_rewards,
    };
    w.json("summary.json", &Stamped { config_hash: &hash, seed, body: &summary })?;
    say(common, format!("simulated {} ticks of `{}` (seed {seed}, config {})", summary.horizon, summary.scenario, &hash[..12]));
    say(common, format!("final distance to equilibrium: {}", opt(summary.final_distance.map(fmt_num))));
    say(
        common,
        format!(
            "settled from tick: neural {}, cognitive {}, behavioral {}",
            opt(summary.drift.neural),
            opt(summary.drift.cognitive),
            opt(summary.drift.behavioral)
        ),
    );
    say(common, format!("wrote {}", display(&w.path("log.jsonl"))));
    w.sidecar("simulate", &hash, seed)
}

fn expectation_for(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Expectation {
    cfg.analysis.expectation.unwrap_or_else(|| {
        if scenario.specs.iter().any(|s| s.emission.is_stochastic()) {
            Expectation::MonteCarlo { samples: cfg.tolerances.samples, seed }
        } else {
            Expectation::Exact
        }
    })
}

#[derive(Debug, Serialize)]
struct FixedPointSummary {
    iterations: usize,
    converged: bool,
    diverged: bool,
    residual: f64,
    point: Vec<f64>,
}

impl From<FixedPointResult> for FixedPointSummary {
    fn from(r: FixedPointResult) -> Self {
        FixedPointSummary {
            iterations: r.iterations,
            converged: r.converged,
            diverged: r.diverged,
            residual: r.residual,
            point: r.point,
        }
    }
}

#[derive(Debug, Serialize)]
struct StabilityOutput {
    expectation: Expectation,
    dimension: usize,
    layout: Vec<String>,
    fixed_point: FixedPointSummary,
    /// `fixed_point` or `final_snapshot`.
    #[serde(skip_serializing_if = "Option::is_none")]
    linearised_at: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jacobian: Option<JacobianEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stability: Option<StabilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
}

pub fn analyze(log_path: &Path, common: &Common) -> Result<(), Failure> {
    let given = optional_config(common)?;
    let log = load_log(log_path, given.as_ref())?;
    let cfg = given.clone().unwrap_or_else(|| ExperimentConfig {
        scenario: log.header.scenario.clone(),
        run: log.header.run.clone(),
        perturbation: log.header.perturbation.clone(),
        analysis: Default::default(),
        tolerances: Default::default(),
        weights: Default::default(),
        sweep: None,
        estimate: Default::default(),
        output: None,
    });
    let scenario = rebuild(&log)?;
    let hash = log.header.config_hash.clone();
    let seed = log.header.seed;
    let last = log
        .snapshots
        .last()
        .ok_or_else(|| Failure::data(format!("{} has no snapshots", display(log_path))))?;
    let agents = &last.agents;
    let expectation = expectation_for(&cfg, &scenario, seed);
    let field = MeanField::new(&scenario, expectation, cfg.analysis.weighting)?;
    let mut w = Writer::new(out_dir(common, given.as_ref())?);

    if cfg.analysis.mie {
        let mut report: EquilibriumReport = evaluate_mie(&field, agents, cfg.tolerances)?;
        report.distance = distance_series(&scenario.game, &log, &cfg.weights)?.last().map(|p| p.1);
        w.json("equilibrium.json", &Stamped { config_hash: &hash, seed, body: &report })?;
        say(
            common,
            format!(
                "verdict at tick {}: {:?} (conditions met: {})",
                last.t,
                report.verdict,
                if report.satisfied.is_empty() { "none".to_string() } else { report.satisfied.join(", ") }
            ),
        );
        say(common, format!("best-response gaps: {}", report.brgap.iter().map(|g| fmt_num(*g)).collect::<Vec<_>>().join(", ")));
    }

    if cfg.analysis.stability {
        let x = flatten(agents);
        let fp = find_fixed_point(&field, &x, &cfg.analysis.fixed_point)?;
        let (at, point, linearised_at) = if fp.converged {
            ("fixed point", fp.point.clone(), "fixed_point")
        } else {
            ("final snapshot", x.clone(), "final_snapshot")
        };
        let mut out = StabilityOutput {
            expectation,
            dimension: x.len(),
            layout: mie_core::equilibrium::layout(agents),
            fixed_point: fp.into(),
            linearised_at: None,
            jacobian: None,
            stability: None,
            skipped: None,
        };
        if x.is_empty() {
            out.skipped = Some("the joint state has no free coordinates".into());
        } else if x.len() > MAX_JACOBIAN_DIM {
            out.skipped = Some(format!("dimension {} exceeds the Jacobian limit {MAX_JACOBIAN_DIM}", x.len()));
        } else {
            let jac = mean_field_jacobian(&field, &point, cfg.analysis.jacobian_step)?;
            let report = classify_stability(&jac.matrix, cfg.tolerances.neutral_band)?;
            say(
                common,
                format!(
                    "stability at the {at}: {:?}, spectral radius {}",
                    report.classification,
                    fmt_num(report.spectral_radius)
                ),
            );
            out.linearised_at = Some(linearised_at);
            out.jacobian = Some(jac);
            out.stability = Some(report);
        }
        if let Some(why) = &out.skipped {
            warn(common, format!("stability skipped: {why}"));
        }
        w.json("stability.json", &Stamped { config_hash: &hash, seed, body: &out })?;
    }
    w.sidecar("analyze", &hash, seed)
}

/// Hash of everything that determines a sweep's results.
fn sweep_hash(cfg: &ExperimentConfig, sweep: &SweepConfig) -> String {
    let mut sweep = sweep.clone();
    if let BasinMethod::Rollout { seed, .. } = &mut sweep.method {
        *seed = 0;
    }
    canonical_hash(&serde_json::json!({ "scenario": cfg.scenario, "sweep": sweep }))
}

fn status_name(s: CellStatus) -> &'static str {
    match s {
        CellStatus::Converged => "converged",
        CellStatus::Diverged => "diverged",
        CellStatus::Undetermined => "undetermined",
        CellStatus::Failed => "failed",
    }
}

fn sweep_csv(hash: &str, seed: u64, map: &BasinMap) -> String {
    let width = map.cells.iter().map(|c| c.endpoint.len()).max().unwrap_or(0);
    let mut out = format!("# config_hash={hash}, seed={seed}\n");
    let mut cols: Vec<String> = map.axes.iter().map(|a| a.key.clone()).collect();
    cols.extend(["status", "attractor", "convergence_time"].map(String::from));
    cols.extend((0..width).map(|k| format!("endpoint_{k}")));
    out.push_str(&cols.join(","));
    out.push('\n');
    for c in &map.cells {
        let mut row: Vec<String> = c.coords.iter().map(|v| fmt_num(*v)).collect();
        row.push(status_name(c.status).into());
        row.push(c.attractor.map_or_else(String::new, |a| a.to_string()));
        row.push(c.convergence_time.to_string());
        row.extend((0..width).map(|k| c.endpoint.get(k).map_or_else(String::new, |v| fmt_num(*v))));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn sweep(common: &Common) -> Result<(), Failure> {
    let cfg = required_config(common)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Failure::config("config has no `sweep` table"))?;
    let hash = sweep_hash(&cfg, &sweep);
    let seed = cfg.seed();
    let map = basin_map(&cfg.scenario, &sweep.axes, &sweep.options())?;
    let mut w = Writer::new(out_dir(common, Some(&cfg))?);
    w.text("sweep.csv", &sweep_csv(&hash, seed, &map))?;
    w.json("sweep.json", &Stamped { config_hash: &hash, seed, body: &map })?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &map.cells {
        *counts.entry(status_name(c.status)).or_default() += 1;
    }
    say(
        common,
        format!(
            "swept {} cells: {}; {} attractor(s)",
            map.cells.len(),
            counts.iter().map(|(k, v)| format!("{v} {k}")).collect::<Vec<_>>().join(", "),
            map.attractors.len()
        ),
    );
    w.sidecar("sweep", &hash, seed)?;
    if let Some(bad) = map.cells.iter().find(|c| c.status == CellStatus::Failed) {
        let n = counts.get("failed").copied().unwrap_or(0);
        return Err(Failure {
            code: EXIT_SWEEP,
            message: format!(
                "{n} cell(s) failed; first at {:?}: {}",
                bad.coords,
                bad.error.as_deref().unwrap_or("unknown error")
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BeliefDivergence {
    agent: usize,
    state: usize,
    divergence: Divergence,
}

#[derive(Debug, Serialize)]
struct CcaSummary {
    agents: [usize; 2],
    correlations: Vec<f64>,
    x_weights: Vec<Vec<f64>>,
    y_weights: Vec<Vec<f64>>,
    ridge_x: f64,
    ridge_y: f64,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Note {
    Warning { stage: &'static str, message: String },
}

#[derive(Debug, Serialize)]
struct EstimateOutput {
    policies: Vec<EmpiricalPolicy>,
    belief_divergences: Vec<BeliefDivergence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    convergence: Option<ConvergenceReport>,
    depth: Vec<DepthComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cca: Option<CcaSummary>,
    notes: Vec<Note>,
}

fn policies_csv(hash: &str, seed: u64, policies: &[EmpiricalPolicy]) -> String {
    let mut out = format!("# config_hash={hash}, seed={seed}\nagent,state,action,count,probability\n");
    for p in policies {
        for (s, row) in p.counts.iter().enumerate() {
            for (a, n) in row.iter().enumerate() {
                let prob = p.probs[s].as_ref().map_or_else(String::new, |r| fmt_num(r[a]));
                out.push_str(&format!("{},{s},{a},{n},{prob}\n", p.agent));
            }
        }
    }
    out
}

/// Agents whose signal is present on every tick.
fn neural_series(log: &InteractionLog) -> Vec<usize> {
    (0..log.header.num_agents)
        .filter(|&i| {
            !log.ticks.is_empty() && log.ticks.iter().all(|t| t.signals.get(i).is_some_and(|s| !s.is_empty()))
        })
        .collect()
}

pub fn estimate(log_path: &Path, common: &Common) -> Result<(), Failure> {
    let given = optional_config(common)?;
    let log = load_log(log_path, given.as_ref())?;
    let scenario = rebuild(&log)?;
    let game = &scenario.game;
    let settings = given.as_ref().map(|c| c.estimate.clone()).unwrap_or_default();
    let tol = given.as_ref().map(|c| c.tolerances).unwrap_or_default();
    let weights = given.as_ref().map(|c| c.weights).unwrap_or_default();
    let hash = log.header.config_hash.clone();
    let seed = log.header.seed;
    let mut notes = Vec::new();
    let mut note = |stage: &'static str, message: String| {
        warn(common, format!("{stage}: {message}"));
        notes.push(Note::Warning { stage, message });
    };

    let policies: Vec<EmpiricalPolicy> = (0..game.num_agents())
        .map(|i| empirical_policy(&log.ticks, i, game.num_states(), game.num_actions(i), settings.smoothing))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::data(format!("{}: {e}", display(log_path))))?;

    let mut belief_divergences = Vec::new();
    if game.num_agents() == 2 {
        if let Some(last) = log.snapshots.last() {
            for i in 0..2 {
                let opp = &policies[1 - i];
                let Some(belief) = last.agents[i].belief.probs() else { continue };
                if belief.len() != game.num_actions(1 - i) {
                    continue;
                }
                for s in 0..game.num_states() {
                    if opp.probs[s].is_none() {
                        continue;
                    }
                    let divergence = belief_policy_divergence(belief, opp, s)?;
                    belief_divergences.push(BeliefDivergence { agent: i, state: s, divergence });
                }
            }
        }
    }

    let convergence = match convergence_report(game, &log, &tol, &weights) {
        Ok(r) => Some(r),
        Err(e @ MieError::InsufficientData(_)) => {
            note("convergence", e.to_string());
            None
        }
        Err(e) => return Err(e.into()),
    };

    let mut depth = Vec::new();
    if game.num_agents() == 2 {
        for i in 0..2 {
            match belief_depth_comparison(game, &log.ticks, i, &settings.depths, settings.holdout) {
                Ok(d) => depth.push(d),
                Err(e) => note("depth", format!("agent {i}: {e}")),
            }
        }
    } else {
        note("depth", "depth comparison needs a two-agent game".into());
    }

    let mut cca = None;
    if settings.cca {
        let with_signal = neural_series(&log);
        if with_signal.len() < 2 {
            note("cca", "skipped: the log has no paired neural series".into());
        } else {
            let (a, b) = (with_signal[0], with_signal[1]);
            let x: Vec<Vec<f64>> = log.ticks.iter().map(|t| t.signals[a].clone()).collect();
            let y: Vec<Vec<f64>> = log.ticks.iter().map(|t| t.signals[b].clone()).collect();
            match cca_shared_subspace(&x, &y, settings.cca_components, None) {
                Ok(r) => {
                    cca = Some(CcaSummary {
                        agents: [a, b],
                        correlations: r.correlations,
                        x_weights: r.x_weights,
                        y_weights: r.y_weights,
                        ridge_x: r.ridge_x,
                        ridge_y: r.ridge_y,
                    })
                }
                Err(e) => note("cca", format!("skipped: {e}")),
            }
        }
    }

    let out = EstimateOutput {
        policies,
        belief_divergences,
        convergence,
        depth,
        cca,
        notes,
    };
    let mut w = Writer::new(out_dir(common, given.as_ref())?);
    w.text("policies.csv", &policies_csv(&hash, seed, &out.policies))?;
    w.json("estimate.json", &Stamped { config_hash: &hash, seed, body: &out })?;
    for d in &out.depth {
        say(common, format!("agent {}: best belief depth {}", d.agent, d.best_depth));
    }
    if let Some(c) = &out.cca {
        say(common, format!("shared subspace correlations: {}", c.correlations.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(", ")));
    }
    w.sidecar("estimate", &hash, seed)
}

pub fn replay(log_path: &Path, common: &Common) -> Result<(), Failure> {
    let given = match &common.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    let log = load_log(log_path, None)?;
    let report = replay_log(&log, given.as_ref().map(|c| &c.scenario), common.seed)?;
    let hash = log.header.config_hash.clone();
    let seed = common.seed.unwrap_or(log.header.seed);
    let mut w = Writer::new(out_dir(common, given.as_ref())?);
    w.json("replay.json", &Stamped { config_hash: &hash, seed, body: &report })?;
    w.sidecar("replay", &hash, seed)?;
    match &report.first_divergence {
        None => {
            say(common, format!("replayed {} ticks: identical", report.ticks_checked));
            Ok(())
        }
        Some(d) => Err(Failure::data(format!("replay diverges at tick {} in `{}`", d.t, d.field))),
    }
}
