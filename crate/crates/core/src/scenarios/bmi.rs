//! Brain-machine interface co-adaptation in a linear-quadratic setting.
//!
//! The brain (agent 0) encodes a target `t` as activity `n = E t + noise`; the machine
//! (agent 1) decodes `u = D n`. The brain keeps a belief `D_hat` about the decoder,
//! refitted from the `(n, u)` pairs it sees, and descends `|u - t|^2` through it. The
//! decoder descends the same error by least mean squares.

use serde::{Deserialize, Serialize};

use crate::agent::{
    AgentSpec, BeliefRule, BeliefState, Emission, MultilevelAgentState, NeuralParams, NeuralRule,
    OperatorPeriods, Policy, PolicyRule,
};
use crate::error::{MieError, Result};
use crate::game::{GameSpec, TabularMarkovGame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmiConfig {
    #[serde(default = "one")]
    pub dims: usize,
    #[serde(default = "default_alpha_h")]
    pub alpha_h: f64,
    #[serde(default = "default_alpha_m")]
    pub alpha_m: f64,
    /// Initial encoder gain (`E = e0 I`).
    #[serde(default = "one_f")]
    pub e0: f64,
    /// Initial decoder gain (`D = d0 I`).
    #[serde(default = "default_d0")]
    pub d0: f64,
    /// Target amplitude; targets are `+-sigma e_k`, drawn uniformly each tick.
    #[serde(default = "one_f")]
    pub sigma: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_alpha_h() -> f64 {
    0.2
}
fn default_alpha_m() -> f64 {
    0.01
}
fn default_d0() -> f64 {
    0.8
}
fn default_noise() -> f64 {
    0.05
}

impl Default for BmiConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Linearised per-tick factor of the scalar gain error `g - 1` (with `g = d e`) around
/// the current gains: `1 - alpha_H c_H - alpha_M c_M`, `c_H = d^2 sigma^2`, `c_M = e^2 sigma^2`.
///
/// Both sides update from the same tick's error, so their corrections add.
pub fn bmi_scalar_factor(alpha_h: f64, alpha_m: f64, e: f64, d: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    1.0 - alpha_h * d * d * s2 - alpha_m * e * e * s2
}

impl BmiConfig {
    pub fn targets(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.dims);
        for k in 0..self.dims {
            for sign in [1.0, -1.0] {
                let mut t = vec![0.0; self.dims];
                t[k] = sign * self.sigma;
                out.push(t);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(MieError::usage("dims must be >= 1"));
        }
        for (name, v) in [
            ("alpha_h", self.alpha_h),
            ("alpha_m", self.alpha_m),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MieError::usage(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(MieError::usage("sigma must be finite and > 0"));
        }
        Ok(())
    }

    pub(super) fn build(&self) -> Result<(TabularMarkovGame, Vec<AgentSpec>, Vec<MultilevelAgentState>)> {
        self.validate()?;
        let targets = self.targets();
        let n = targets.len();
        let uniform = vec![1.0 / n as f64; n];
        let game = TabularMarkovGame::new(GameSpec {
            states: n,
            actions_per_agent: vec![1, 1],
            transition: vec![vec![uniform.clone()]; n],
            rewards: vec![vec![vec![0.0]; n]; 2],
            discount: 0.95,
            initial_dist: uniform,
        })?;
        let d = self.dims;
        let scaled_identity = |g: f64| -> Vec<f64> {
            (0..d * d).map(|k| if k / d == k % d { g } else { 0.0 }).collect()
        };
        let trivial = Policy::tabular_constant(vec![vec![1.0]; n], 11, None);
        let brain = AgentSpec {
            name: "brain".into(),
            belief_rule: BeliefRule::LinearModel {
                input: 0,
                output: 1,
                gain: 1.0,
            },
            neural_rule: NeuralRule::EncoderGradient {
                targets: targets.clone(),
                feedback: 1,
            },
            policy_rule: PolicyRule::Fixed,
            emission: Emission::Encode {
                targets: targets.clone(),
                noise: self.noise,
            },
            periods: OperatorPeriods::default(),
        };
        let machine = AgentSpec {
            name: "decoder".into(),
            belief_rule: BeliefRule::Static,
            neural_rule: NeuralRule::DecoderLms { targets, input: 0 },
            policy_rule: PolicyRule::Fixed,
            emission: Emission::Decode { source: 0 },
            periods: OperatorPeriods::default(),
        };
        Ok((
            game,
            vec![brain, machine],
            vec![
                MultilevelAgentState {
                    theta: NeuralParams::new(scaled_identity(self.e0), self.alpha_h),
                    belief: BeliefState::point(scaled_identity(self.d0)),
                    policy: trivial.clone(),
                },
                MultilevelAgentState {
                    theta: NeuralParams::new(scaled_identity(self.d0), self.alpha_m),
                    belief: BeliefState::point(vec![]),
                    policy: trivial,
                },
            ],
        ))
    }
}

/// `|D E - I|_F` for row-major square matrices.
pub fn gain_error(decoder: &[f64], encoder: &[f64]) -> f64 {
    let d = (decoder.len() as f64).sqrt().round() as usize;
    let mut total = 0.0;
    for r in 0..d {
        for c in 0..d {
            let v: f64 = (0..d).map(|k| decoder[r * d + k] * encoder[k * d + c]).sum();
            let target = if r == c { 1.0 } else { 0.0 };
            total += (v - target) * (v - target);
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_matches_documented_examples() {
        // defaults: e = 1, d = 0.8, sigma = 1
        let slow = bmi_scalar_factor(0.2, 0.01, 1.0, 0.8, 1.0);
        assert!(slow.abs() < 1.0);
        let fast = bmi_scalar_factor(0.2, 1.9, 1.0, 0.8, 1.0);
        assert!(fast.abs() > 1.0);
    }

    #[test]
    fn gain_error_of_identity_is_zero() {
        assert_eq!(gain_error(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]), 0.0);
        assert!((gain_error(&[0.8], &[1.0]) - 0.2).abs() < 1e-15);
    }
}
