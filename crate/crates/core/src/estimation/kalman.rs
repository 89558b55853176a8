use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};

/// `x' = A x + w`, `y = H x + v` with `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianModel {
    pub transition: Vec<Vec<f64>>,
    pub observation: Vec<Vec<f64>>,
    pub process_noise: Vec<Vec<f64>>,
    pub observation_noise: Vec<Vec<f64>>,
    pub initial_mean: Vec<f64>,
    pub initial_cov: Vec<Vec<f64>>,
}

fn mat(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(MieError::usage(format!("`{name}` must be {r}x{c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * (1.0 + m[(i, j)].abs()) {
                return Err(MieError::usage(format!("`{name}` is not symmetric")));
            }
        }
    }
    let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l < -1e-10 * scale) {
        return Err(MieError::usage(format!("`{name}` is not positive semidefinite")));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanOutput {
    /// Filtered mean after each observation.
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Gain used at each step.
    pub gains: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Predict-then-update for every observation, starting from the initial prior on
/// the state before the first observation.
pub fn kalman_filter(model: &LinearGaussianModel, observations: &[Vec<f64>]) -> Result<KalmanOutput> {
    let n = model.initial_mean.len();
    let p = model.observation.len();
    let a = mat(&model.transition, n, n, "transition")?;
    let h = mat(&model.observation, p, n, "observation")?;
    let q = mat(&model.process_noise, n, n, "process_noise")?;
    let r = mat(&model.observation_noise, p, p, "observation_noise")?;
    let mut cov = mat(&model.initial_cov, n, n, "initial_cov")?;
    check_psd(&q, "process_noise")?;
    check_psd(&r, "observation_noise")?;
    check_psd(&cov, "initial_cov")?;
    let mut mean = DVector::from_column_slice(&model.initial_mean);
    // zero observation noise with an invertible square observation matrix pins the
    // state to the observation
    let exact = (p == n && r.iter().all(|v| *v == 0.0)).then(|| h.clone().lu());
    let mut out = KalmanOutput {
        means: Vec::with_capacity(observations.len()),
        covariances: Vec::with_capacity(observations.len()),
        gains: Vec::with_capacity(observations.len()),
        log_likelihood: 0.0,
    };
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for (t, y) in observations.iter().enumerate() {
        if y.len() != p {
            return Err(MieError::usage(format!("observation {t} has {} entries, expected {p}", y.len())));
        }
        let y = DVector::from_column_slice(y);
        let m_pred = &a * &mean;
        let p_pred = symmetrize(&(&a * &cov * a.transpose() + &q));
        let innov = &y - &h * &m_pred;
        let s = symmetrize(&(&h * &p_pred * h.transpose() + &r));
        let chol = s.clone().cholesky().ok_or_else(|| {
            MieError::numerical(format!("innovation covariance is not invertible at step {t}"), None)
        })?;
        let s_inv_innov = chol.solve(&innov);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        out.log_likelihood += -0.5 * (innov.dot(&s_inv_innov) + log_det + p as f64 * ln2pi);
        // K = P H' S^-1
        let gain = (chol.solve(&(&h * &p_pred))).transpose();
        match &exact {
            Some(lu) => {
                mean = lu
                    .solve(&y)
                    .ok_or_else(|| MieError::numerical("observation matrix is singular", None))?;
                cov = DMatrix::zeros(n, n);
            }
            None => {
                mean = &m_pred + &gain * &innov;
                // Joseph form keeps the covariance PSD
                let i_kh = DMatrix::identity(n, n) - &gain * &h;
                cov = symmetrize(&(&i_kh * &p_pred * i_kh.transpose() + &gain * &r * gain.transpose()));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(MieError::numerical(format!("filter diverged at step {t}"), None));
        }
        out.means.push(mean.iter().copied().collect());
        out.covariances.push(rows(&cov));
        out.gains.push(rows(&gain));
    }
    Ok(out)
}

/// Steady-state gain of the scalar random walk `x' = x + w`, `y = x + v`.
pub fn scalar_steady_gain(q: f64, r: f64) -> f64 {
    // prior variance solves P = P r / (P + r) + q
    let p = (q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
    p / (p + r)
}
