use mie_core::equilibrium::{brgap, brgaps, check_mie, Expectation, Levels, MeanField, StateWeighting, ToleranceConfig, Verdict};
use mie_core::estimation::empirical_policy;
use mie_core::game::{GameSpec, TabularMarkovGame};
use mie_core::mdp::{single_agent_mdp, StatePolicy};
use mie_core::scenarios::{
    nash_profiles, payoffs, Learner, MatrixGameConfig, MatrixGameName, Scenario, ScenarioConfig,
};
use mie_core::sim::{rollout, RunConfig, Rollout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_game(rng: &mut ChaCha8Rng) -> TabularMarkovGame {
    let states = rng.random_range(1..=4);
    let actions = vec![rng.random_range(1..=3), rng.random_range(1..=3)];
    let joint = actions[0] * actions[1];
    let dist = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    };
    let transition = (0..states).map(|_| (0..joint).map(|_| dist(rng, states)).collect()).collect();
    let rewards = (0..2)
        .map(|_| (0..states).map(|_| (0..joint).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let initial_dist = dist(rng, states);
    TabularMarkovGame::new(GameSpec {
        states,
        actions_per_agent: actions,
        transition,
        rewards,
        discount: 0.9,
        initial_dist,
    })
    .unwrap()
}

fn random_policy(rng: &mut ChaCha8Rng, states: usize, actions: usize) -> StatePolicy {
    (0..states)
        .map(|_| {
            let w: Vec<f64> = (0..actions).map(|_| rng.random::<f64>()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Best deterministic stationary response by enumerating every policy, each evaluated
/// by iterating its Bellman operator to convergence.
fn enumerated_gap(game: &TabularMarkovGame, joint: &[StatePolicy], agent: usize) -> f64 {
    let mdp = single_agent_mdp(game, agent, joint).unwrap();
    let n = mdp.num_states;
    let na = mdp.num_actions;
    let eval = |pol: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut v = vec![0.0; n];
        for _ in 0..2000 {
            v = (0..n)
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            let p = pol(s, a);
                            if p == 0.0 {
                                return 0.0;
                            }
                            let cont: f64 = mdp.row(s, a).iter().zip(&v).map(|(q, x)| q * x).sum();
                            p * (mdp.reward(s, a) + mdp.discount * cont)
                        })
                        .sum()
                })
                .collect();
        }
        v
    };
    let mu = game.initial_dist();
    let score = |v: &[f64]| mu.iter().zip(v).map(|(m, x)| m * x).sum::<f64>();
    let own = score(&eval(&|s, a| joint[agent][s][a]));
    let mut best = f64::NEG_INFINITY;
    for code in 0..na.pow(n as u32) {
        let choice: Vec<usize> = (0..n).map(|s| (code / na.pow(s as u32)) % na).collect();
        let v = eval(&|s, a| if choice[s] == a { 1.0 } else { 0.0 });
        best = best.max(score(&v));
    }
    (best - own).max(0.0)
}

#[test]
fn brgap_agrees_with_enumeration_on_random_games() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let g = random_game(&mut rng);
        let joint: Vec<StatePolicy> = (0..2).map(|i| random_policy(&mut rng, g.num_states(), g.num_actions(i))).collect();
        for i in 0..2 {
            let a = brgap(&g, &joint, i).unwrap();
            let b = enumerated_gap(&g, &joint, i);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn nash_profiles_have_zero_gap() {
    for name in [MatrixGameName::MatchingPennies, MatrixGameName::PrisonersDilemma, MatrixGameName::Coordination] {
        let g = mie_core::game::repeated_game(vec![2, 2], payoffs(name), 0.9).unwrap();
        for profile in nash_profiles(name) {
            for i in 0..2 {
                assert!(brgap(&g, &profile, i).unwrap() < 1e-9);
            }
        }
    }
}

#[test]
fn mismatched_heads_gap() {
    let gamma = 0.9;
    let g = mie_core::game::repeated_game(vec![2, 2], payoffs(MatrixGameName::MatchingPennies), gamma).unwrap();
    let heads = vec![vec![1.0, 0.0]];
    let gap = brgap(&g, &[heads.clone(), heads], 1).unwrap();
    assert!((gap - 2.0 / (1.0 - gamma)).abs() < 1e-9);
}

#[test]
fn smooth_fictitious_play_in_matching_pennies() {
    let cfg = MatrixGameConfig::new(MatrixGameName::MatchingPennies, Learner::FictitiousPlay, 5.0, 0.1);
    let sc = Scenario::build(ScenarioConfig::MatrixGame(cfg)).unwrap();
    let start = std::time::Instant::now();
    let log = rollout(&sc, &RunConfig::new(11, 10_000).with_cadence(1000)).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let mut joint = Vec::new();
    for i in 0..2 {
        let p = empirical_policy(&log.ticks, i, 1, 2, 0.0).unwrap();
        let row = p.probs[0].clone().unwrap();
        assert!((row[0] - 0.5).abs() < 0.05, "agent {i}: {row:?}");
        joint.push(p.filled());
    }
    let scale = 1.0 - sc.game.discount();
    for i in 0..2 {
        let gap = brgap(&sc.game, &joint, i).unwrap();
        assert!(gap * scale < 0.1, "{gap}");
    }
}

#[test]
fn prisoners_dilemma_q_learners_defect() {
    let cfg = MatrixGameConfig::new(MatrixGameName::PrisonersDilemma, Learner::QLearning, 10.0, 0.1);
    let sc = Scenario::build(ScenarioConfig::MatrixGame(cfg)).unwrap();
    let mut defect = 0;
    let tol = ToleranceConfig {
        eps_cognitive: 0.05,
        eps_brgap: 0.05,
        ..ToleranceConfig::default()
    };
    for seed in 0..100 {
        let mut sim = Rollout::new(&sc, &RunConfig::new(seed, 2000));
        for _ in 0..2000 {
            sim.tick().unwrap();
        }
        let greedy: Vec<bool> = sim.agents.iter().map(|a| a.theta.values[1] > a.theta.values[0]).collect();
        if greedy.iter().all(|d| *d) {
            defect += 1;
            let field = MeanField::new(&sc, Expectation::Exact, StateWeighting::Stationary).unwrap();
            let neural = field.residuals(&sim.agents, Levels::Neural).unwrap();
            let cognitive = field.residuals(&sim.agents, Levels::Cognitive).unwrap();
            let gaps = brgaps(&sc.game, &sim.agents).unwrap();
            let report = check_mie(neural, cognitive, gaps, tol).unwrap();
            assert!(report.verdict != Verdict::None, "{report:?}");
            assert!(report.holds("ii") && report.holds("iii"));
        }
    }
    assert!(defect >= 95, "{defect}");
}

