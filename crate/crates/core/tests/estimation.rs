use std::collections::HashMap;

use mie_core::agent::{
    AgentSpec, BeliefRate, BeliefRule, BeliefState, Emission, MultilevelAgentState, NeuralParams, NeuralRule,
    OperatorPeriods, Policy, PolicyRule,
};
use mie_core::estimation::{
    belief_depth_comparison, belief_policy_divergence, cca_shared_subspace, empirical_policy, kalman_filter,
    kl_divergence, LinearGaussianModel,
};
use mie_core::game::GameSpec;
use mie_core::scenarios::{CustomAgent, CustomConfig, Learner, MatrixGameConfig, MatrixGameName, Scenario, ScenarioConfig};
use mie_core::sim::{rollout, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn fixed_agent(name: &str, policy: Vec<Vec<f64>>) -> CustomAgent {
    CustomAgent {
        spec: AgentSpec {
            name: name.into(),
            belief_rule: BeliefRule::Static,
            neural_rule: NeuralRule::Static,
            policy_rule: PolicyRule::Fixed,
            emission: Emission::None,
            periods: OperatorPeriods::default(),
        },
        state: MultilevelAgentState {
            theta: NeuralParams::new(vec![], 0.0),
            belief: BeliefState::point(vec![]),
            policy: Policy::tabular_constant(policy, 11, None),
        },
    }
}

fn stationary_scenario(p0: Vec<Vec<f64>>, p1: Vec<Vec<f64>>) -> Scenario {
    let game = GameSpec {
        states: 2,
        actions_per_agent: vec![2, 2],
        transition: vec![
            vec![vec![0.5, 0.5], vec![0.2, 0.8], vec![0.9, 0.1], vec![0.4, 0.6]],
            vec![vec![0.3, 0.7], vec![0.6, 0.4], vec![0.5, 0.5], vec![0.1, 0.9]],
        ],
        rewards: vec![vec![vec![1.0, 0.0, 0.0, 1.0]; 2], vec![vec![0.0, 1.0, 1.0, 0.0]; 2]],
        discount: 0.9,
        initial_dist: vec![1.0, 0.0],
    };
    Scenario::build(ScenarioConfig::Custom(CustomConfig {
        game,
        agents: vec![fixed_agent("a", p0), fixed_agent("b", p1)],
    }))
    .unwrap()
}

#[test]
fn empirical_policy_recovers_the_generator() {
    let truth = vec![vec![0.3, 0.7], vec![0.85, 0.15]];
    let sc = stationary_scenario(truth.clone(), vec![vec![0.5, 0.5]; 2]);
    let log = rollout(&sc, &RunConfig::new(17, 40_000).with_cadence(40_000)).unwrap();
    let fit = empirical_policy(&log.ticks, 0, 2, 2, 0.0).unwrap();
    for s in 0..2 {
        let row = fit.probs[s].as_ref().unwrap();
        for a in 0..2 {
            assert!((row[a] - truth[s][a]).abs() < 0.01, "s={s} a={a} {}", row[a]);
        }
    }
    // recount independently, with and without smoothing
    let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
    for t in &log.ticks {
        *counts.entry((t.state, t.actions[0])).or_default() += 1;
    }
    for c in [0.0, 0.5, 2.0] {
        let fit = empirical_policy(&log.ticks, 0, 2, 2, c).unwrap();
        for s in 0..2 {
            let n: Vec<u64> = (0..2).map(|a| counts.get(&(s, a)).copied().unwrap_or(0)).collect();
            assert_eq!(fit.counts[s], n);
            let z = (n[0] + n[1]) as f64 + 2.0 * c;
            for a in 0..2 {
                assert_eq!(fit.probs[s].as_ref().unwrap()[a], (n[a] as f64 + c) / z);
            }
        }
    }
}

#[test]
fn divergence_of_a_matching_belief_is_small() {
    let sc = stationary_scenario(vec![vec![0.5, 0.5]; 2], vec![vec![0.75, 0.25]; 2]);
    let log = rollout(&sc, &RunConfig::new(3, 20_000).with_cadence(20_000)).unwrap();
    let opp = empirical_policy(&log.ticks, 1, 2, 2, 0.0).unwrap();
    let right = belief_policy_divergence(&[0.75, 0.25], &opp, 0).unwrap().value();
    let wrong = belief_policy_divergence(&[0.5, 0.5], &opp, 0).unwrap().value();
    assert!(right < 1e-3);
    assert!((wrong - 0.13081).abs() < 0.01);
    let exact = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap().value();
    assert!((exact - 0.13081).abs() < 1e-5);
}

type M2 = [[f64; 2]; 2];

fn mul(a: M2, b: M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn tr(a: M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn add(a: M2, b: M2) -> M2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

/// Textbook two-state, scalar-observation filter written out by hand.
fn reference_filter(a: M2, h: [f64; 2], q: M2, r: f64, m0: [f64; 2], p0: M2, ys: &[f64]) -> (Vec<[f64; 2]>, Vec<M2>, f64) {
    let (mut m, mut p) = (m0, p0);
    let mut ll = 0.0;
    let (mut means, mut covs) = (vec![], vec![]);
    for &y in ys {
        m = [a[0][0] * m[0] + a[0][1] * m[1], a[1][0] * m[0] + a[1][1] * m[1]];
        p = add(mul(mul(a, p), tr(a)), q);
        let ph = [p[0][0] * h[0] + p[0][1] * h[1], p[1][0] * h[0] + p[1][1] * h[1]];
        let s = h[0] * ph[0] + h[1] * ph[1] + r;
        let k = [ph[0] / s, ph[1] / s];
        let innov = y - (h[0] * m[0] + h[1] * m[1]);
        m = [m[0] + k[0] * innov, m[1] + k[1] * innov];
        let ikh = [[1.0 - k[0] * h[0], -k[0] * h[1]], [-k[1] * h[0], 1.0 - k[1] * h[1]]];
        p = mul(ikh, p);
        ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
        means.push(m);
        covs.push(p);
    }
    (means, covs, ll)
}

#[test]
fn kalman_matches_the_reference_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = [[0.9, 0.1], [-0.2, 0.95]];
    let h = [1.0, 0.5];
    let q = [[0.05, 0.01], [0.01, 0.02]];
    let r: f64 = 0.3;
    let mut x = [1.0, -1.0];
    let mut ys = vec![];
    for _ in 0..200 {
        let w: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        x = [
            a[0][0] * x[0] + a[0][1] * x[1] + 0.2 * w[0],
            a[1][0] * x[0] + a[1][1] * x[1] + 0.1 * w[1],
        ];
        let v: f64 = StandardNormal.sample(&mut rng);
        ys.push(h[0] * x[0] + h[1] * x[1] + r.sqrt() * v);
    }
    let model = LinearGaussianModel {
        transition: a.iter().map(|r| r.to_vec()).collect(),
        observation: vec![h.to_vec()],
        process_noise: q.iter().map(|r| r.to_vec()).collect(),
        observation_noise: vec![vec![r]],
        initial_mean: vec![0.0, 0.0],
        initial_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    };
    let obs: Vec<Vec<f64>> = ys.iter().map(|y| vec![*y]).collect();
    let out = kalman_filter(&model, &obs).unwrap();
    let (means, covs, ll) = reference_filter(a, h, q, r, [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], &ys);
    for t in 0..ys.len() {
        for i in 0..2 {
            assert!((out.means[t][i] - means[t][i]).abs() < 1e-10);
            for j in 0..2 {
                assert!((out.covariances[t][i][j] - covs[t][i][j]).abs() < 1e-10);
            }
        }
    }
    assert!((out.log_likelihood - ll).abs() < 1e-10 * ll.abs().max(1.0));
}

fn correlated_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut x = vec![];
    let mut y = vec![];
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        let e: Vec<f64> = (0..5).map(|_| StandardNormal.sample(rng)).collect();
        x.push(vec![z + 0.5 * e[0], e[1], 0.3 * z + e[2]]);
        y.push(vec![-z + 0.7 * e[3], e[4]]);
    }
    (x, y)
}

#[test]
fn cca_self_correlation_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, _) = correlated_pair(&mut rng, 300);
    let res = cca_shared_subspace(&x, &x, 3, None).unwrap();
    for c in &res.correlations {
        assert!((c - 1.0).abs() < 1e-8, "{c}");
    }
}

#[test]
fn cca_is_invariant_to_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = correlated_pair(&mut rng, 400);
    let base = cca_shared_subspace(&x, &y, 2, None).unwrap();
    let a = [[2.0, 0.3, -1.0], [0.0, 1.5, 0.2], [0.4, 0.0, 0.7]];
    let b = [[0.5, 1.0], [-2.0, 0.3]];
    let xt: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..3).map(|j| (0..3).map(|k| r[k] * a[k][j]).sum::<f64>() + 10.0).collect())
        .collect();
    let yt: Vec<Vec<f64>> = y
        .iter()
        .map(|r| (0..2).map(|j| (0..2).map(|k| r[k] * b[k][j]).sum::<f64>() - 3.0).collect())
        .collect();
    let moved = cca_shared_subspace(&xt, &yt, 2, None).unwrap();
    for (c, d) in base.correlations.iter().zip(&moved.correlations) {
        assert!((c - d).abs() < 1e-6);
    }
    assert!(base.correlations[0] > 0.6);
}

#[test]
fn stationary_play_is_best_explained_without_beliefs() {
    let sc = stationary_scenario(vec![vec![0.7, 0.3]; 2], vec![vec![0.4, 0.6]; 2]);
    for seed in 0..5 {
        let log = rollout(&sc, &RunConfig::new(seed, 2000).with_cadence(2000)).unwrap();
        let cmp = belief_depth_comparison(&sc.game, &log.ticks, 0, &[0, 1, 2], 0.5).unwrap();
        let best = cmp.scores.iter().map(|s| s.log_likelihood).fold(f64::NEG_INFINITY, f64::max);
        assert!(best - cmp.scores[0].log_likelihood < 2.0);
    }
}

#[test]
fn fictitious_play_is_best_explained_at_depth_one() {
    let mut cfg = MatrixGameConfig::new(MatrixGameName::MatchingPennies, Learner::FictitiousPlay, 5.0, 0.1);
    cfg.belief_rate = BeliefRate::Constant { rate: 0.1 };
    let sc = Scenario::build(ScenarioConfig::MatrixGame(cfg)).unwrap();
    let mut wins = 0;
    for seed in 0..20 {
        let log = rollout(&sc, &RunConfig::new(seed, 1000).with_cadence(1000)).unwrap();
        let cmp = belief_depth_comparison(&sc.game, &log.ticks, 0, &[0, 1], 0.5).unwrap();
        if cmp.scores[1].log_likelihood > cmp.scores[0].log_likelihood {
            wins += 1;
        }
    }
    assert!(wins >= 18, "depth 1 won {wins}/20");
}
