use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = "[scenario]\nkind = \"toy\"\nalpha_h = 0.2\nalpha_m = 0.3\nx0 = 0.9\ny0 = 0.1\n\n[run]\nseed = 1\nhorizon = 30\nsnapshot_cadence = 1\n";

const PD: &str = "[scenario]\nkind = \"matrix_game\"\ngame = \"prisoners_dilemma\"\nbeta = 10.0\n\n[run]\nseed = 3\nhorizon = 2000\nsnapshot_cadence = 100\n";

const PENNIES: &str = "[scenario]\nkind = \"matrix_game\"\ngame = \"matching_pennies\"\nbeta = 2.0\n\n[run]\nseed = 3\nhorizon = 500\nsnapshot_cadence = 100\n";

fn mie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mie-lab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn out(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn simulate(dir: &TempDir, cfg: &str, name: &str) -> PathBuf {
    let o = out(dir, name);
    let r = mie(&["simulate", "--config", cfg, "--out", o.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    o
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn toy_series_follows_the_contraction() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let o = simulate(&dir, &cfg, "run");
    let csv = fs::read_to_string(o.join("series.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let d = header.iter().position(|h| *h == "d").unwrap();
    let mut rows = 0;
    for (t, line) in lines.enumerate() {
        let v: f64 = line.split(',').nth(d).unwrap().parse().unwrap();
        assert!((v - 0.8 * 0.3f64.powi(t as i32)).abs() < 1e-15, "t={t}");
        rows += 1;
    }
    assert_eq!(rows, 30);
    for name in ["log.jsonl", "distance.csv", "summary.json", "simulate.meta.json"] {
        assert!(o.join(name).exists(), "{name}");
    }
    let summary = json(&o.join("summary.json"));
    assert_eq!(summary["seed"], 1);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_scenario_kind_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[scenario]\nalpha_h = 0.2\n\n[run]\nhorizon = 10\n");
    let r = mie(&["simulate", "--config", &cfg, "--out", out(&dir, "o").to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("scenario.kind"), "{}", stderr(&r));

    let cfg = write(dir.path(), "typo.toml", &format!("{TOY}\n[tolerances]\neps_nerual = 0.1\n"));
    let r = mie(&["simulate", "--config", &cfg, "--out", out(&dir, "o").to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("eps_nerual"), "{}", stderr(&r));

    let r = mie(&["simulate", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn seed_override_changes_the_log_but_not_the_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "mp.toml", PENNIES);
    let a = simulate(&dir, &cfg, "a");
    let b = out(&dir, "b");
    let r = mie(&["simulate", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0);
    let (sa, sb) = (json(&a.join("summary.json")), json(&b.join("summary.json")));
    assert_eq!(sa["config_hash"], sb["config_hash"]);
    assert_eq!(sb["seed"], 4);
    let ticks = |o: &Path| -> Vec<String> {
        let text = fs::read_to_string(o.join("log.jsonl")).unwrap();
        text.lines().filter(|l| l.contains("\"kind\":\"tick\"")).map(String::from).collect()
    };
    assert_ne!(ticks(&a), ticks(&b));
}

#[test]
fn truncated_log_is_a_data_error_naming_the_tick() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let o = simulate(&dir, &cfg, "run");
    let text = fs::read_to_string(o.join("log.jsonl")).unwrap();
    let keep: Vec<&str> = text
        .lines()
        .take_while(|l| !(l.contains("\"kind\":\"tick\"") && l.contains("\"t\":12,")))
        .collect();
    let cut = write(dir.path(), "cut.jsonl", &(keep.join("\n") + "\n"));
    for cmd in ["analyze", "estimate", "replay"] {
        let r = mie(&[cmd, "--log", &cut, "--out", out(&dir, "x").to_str().unwrap()]);
        assert_eq!(code(&r), 4, "{cmd}: {}", stderr(&r));
        assert!(stderr(&r).contains("tick 12"), "{cmd}: {}", stderr(&r));
    }
    let r = mie(&["analyze", "--log", "/nonexistent/log.jsonl"]);
    assert_eq!(code(&r), 4);
}

#[test]
fn analyze_toy_reports_a_line_attractor() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let o = simulate(&dir, &cfg, "run");
    let log = o.join("log.jsonl");
    let r = mie(&["analyze", "--log", log.to_str().unwrap(), "--config", &cfg, "--out", o.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let st = json(&o.join("stability.json"));
    assert_eq!(st["stability"]["classification"], "neutral");
    let mut eig: Vec<f64> = st["stability"]["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e[0].as_f64().unwrap())
        .collect();
    eig.sort_by(f64::total_cmp);
    // kappa = 1 - 2 * 0.2 - 0.3
    assert!((eig[0] - 0.3).abs() < 1e-8 && (eig[1] - 1.0).abs() < 1e-8, "{eig:?}");
    let fp = st["fixed_point"]["point"].as_array().unwrap();
    // conserved: (alpha_M x + 2 alpha_H y) / (alpha_M + 2 alpha_H)
    let star = (0.3 * 0.9 + 0.4 * 0.1) / 0.7;
    assert!(fp.iter().all(|v| (v.as_f64().unwrap() - star).abs() < 1e-6));
    let eq = json(&o.join("equilibrium.json"));
    assert_eq!(eq["verdict"], "full");
}

#[test]
fn analyze_with_another_config_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let o = simulate(&dir, &cfg, "run");
    let other = write(dir.path(), "other.toml", &TOY.replace("alpha_m = 0.3", "alpha_m = 0.4"));
    let log = o.join("log.jsonl");
    let r = mie(&["analyze", "--log", log.to_str().unwrap(), "--config", &other, "--out", o.to_str().unwrap()]);
    assert_eq!(code(&r), 4);
    assert!(stderr(&r).contains("does not match"), "{}", stderr(&r));
}

#[test]
fn analyze_prisoners_dilemma_finds_small_gaps() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "pd.toml", PD);
    let o = simulate(&dir, &cfg, "run");
    let log = o.join("log.jsonl");
    let r = mie(&["analyze", "--log", log.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let eq = json(&o.join("equilibrium.json"));
    for g in eq["brgap"].as_array().unwrap() {
        assert!(g.as_f64().unwrap() < 0.05, "{g}");
    }
}

#[test]
fn estimate_without_signals_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "pd.toml", PD);
    let o = simulate(&dir, &cfg, "run");
    let log = o.join("log.jsonl");
    let r = mie(&["estimate", "--log", log.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(stderr(&r).contains("cca"), "{}", stderr(&r));
    let est = json(&o.join("estimate.json"));
    assert!(est.get("cca").is_none());
    assert!(est["notes"].as_array().unwrap().iter().any(|n| n["stage"] == "cca"));
    // defecting Q-learners: defection dominates the empirical policy
    let p = est["policies"][0]["probs"][0].as_array().unwrap();
    assert!(p[1].as_f64().unwrap() > 0.5);
    let csv = fs::read_to_string(o.join("policies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 2 * 2);
}

#[test]
fn estimate_bmi_finds_a_shared_subspace() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bmi.toml", "[scenario]\nkind = \"bmi\"\n\n[run]\nseed = 2\nhorizon = 300\n");
    let o = simulate(&dir, &cfg, "run");
    let log = o.join("log.jsonl");
    let r = mie(&["estimate", "--log", log.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let est = json(&o.join("estimate.json"));
    let c = est["cca"]["correlations"][0].as_f64().unwrap();
    assert!(c > 0.0 && c <= 1.0 + 1e-12, "{c}");
}

#[test]
fn replay_confirms_and_detects_divergence() {
    let dir = TempDir::new().unwrap();
    // defection is near certain in the dilemma, so use a game where play stays random
    let cfg = write(dir.path(), "mp.toml", PENNIES);
    let o = simulate(&dir, &cfg, "run");
    let log = o.join("log.jsonl");
    let l = log.to_str().unwrap();
    let r = mie(&["replay", "--log", l, "--out", o.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(json(&o.join("replay.json"))["ok"], true);

    let r = mie(&["replay", "--log", l, "--seed", "99", "--out", o.to_str().unwrap()]);
    assert_eq!(code(&r), 4);
    assert!(stderr(&r).contains("diverges at tick"), "{}", stderr(&r));
    assert!(json(&o.join("replay.json"))["first_divergence"].is_object());

    let other = write(dir.path(), "other.toml", &PENNIES.replace("beta = 2.0", "beta = 3.0"));
    let r = mie(&["replay", "--log", l, "--config", &other, "--out", o.to_str().unwrap()]);
    assert_eq!(code(&r), 4);
}

const SWEEP: &str = "[scenario]\nkind = \"toy\"\n\n[run]\nhorizon = 10\n\n[sweep]\nmethod = \"fixed_point\"\n\n\
[[sweep.axes]]\nkey = \"alpha_h\"\nmin = 0.1\nmax = 0.9\nsteps = 5\n\n\
[[sweep.axes]]\nkey = \"alpha_m\"\nmin = 0.1\nmax = 0.9\nsteps = 3\n";

#[test]
fn sweep_labels_cells_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let (a, b) = (out(&dir, "a"), out(&dir, "b"));
    for (o, jobs) in [(&a, "1"), (&b, "3")] {
        let r = mie(&["sweep", "--config", &cfg, "--jobs", jobs, "--out", o.to_str().unwrap(), "--quiet"]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("sweep.csv")).unwrap());
    let rows: Vec<Vec<&str>> = csv.lines().skip(2).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 15);
    for row in rows {
        let (ah, am): (f64, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let want = if (1.0 - 2.0 * ah - am).abs() < 1.0 { "converged" } else { "diverged" };
        assert_eq!(row[2], want, "alpha_h={ah} alpha_m={am}");
    }
}

#[test]
fn sweep_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = out(&dir, "o");
    let o = o.to_str().unwrap();
    // no sweep table
    let cfg = write(dir.path(), "toy.toml", TOY);
    assert_eq!(code(&mie(&["sweep", "--config", &cfg, "--out", o])), 2);
    // unknown parameter key
    let bad = write(dir.path(), "bad.toml", &SWEEP.replace("key = \"alpha_m\"", "key = \"alpha_q\""));
    let r = mie(&["sweep", "--config", &bad, "--out", o]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
    // grid over the limit
    let huge = write(dir.path(), "huge.toml", &SWEEP.replace("steps = 5", "steps = 100000"));
    assert_eq!(code(&mie(&["sweep", "--config", &huge, "--out", o])), 2);
    // an invalid parameter value anywhere on the grid is caught before running
    let neg = write(dir.path(), "neg.toml", &SWEEP.replace("min = 0.1\nmax = 0.9\nsteps = 5", "min = -0.4\nmax = 0.4\nsteps = 5"));
    assert_eq!(code(&mie(&["sweep", "--config", &neg, "--out", o])), 2);
    // noisy cells cannot take an exact expectation; they fail while the rest still run
    let noisy = write(
        dir.path(),
        "noisy.toml",
        "[scenario]\nkind = \"bmi\"\n\n[run]\nhorizon = 10\n\n[sweep]\nmethod = \"fixed_point\"\n\n\
         [[sweep.axes]]\nkey = \"noise\"\nmin = 0.0\nmax = 0.1\nsteps = 3\n",
    );
    let r = mie(&["sweep", "--config", &noisy, "--out", o]);
    assert_eq!(code(&r), 5, "{}", stderr(&r));
    let csv = fs::read_to_string(Path::new(o).join("sweep.csv")).unwrap();
    assert!(csv.contains(",failed,") && csv.contains(",converged,"));
}

#[test]
fn zero_jobs_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let r = mie(&["simulate", "--config", &cfg, "--jobs", "0", "--out", out(&dir, "o").to_str().unwrap()]);
    assert_eq!(code(&r), 2);
}
