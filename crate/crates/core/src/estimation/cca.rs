use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceResult {
    /// Descending.
    pub correlations: Vec<f64>,
    /// `dim_x x k`; column `c` maps centred X rows to the c-th canonical variate.
    pub x_weights: Vec<Vec<f64>>,
    pub y_weights: Vec<Vec<f64>>,
    /// Canonical variates over time, `T x k`.
    pub x_scores: Vec<Vec<f64>>,
    pub y_scores: Vec<Vec<f64>>,
    pub ridge_x: f64,
    pub ridge_y: f64,
}

fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let t = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(MieError::usage(format!("`{name}` must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MieError::usage(format!("`{name}` has non-finite entries")));
    }
    let mut m = DMatrix::from_fn(t, d, |i, j| rows[i][j]);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Ridge used when none is given: none for well-conditioned covariances, otherwise
/// `1e-6 * trace / dim`.
fn auto_ridge(c: &DMatrix<f64>) -> f64 {
    let eig = c.clone().symmetric_eigen().eigenvalues;
    let hi = eig.iter().copied().fold(0.0, f64::max);
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if hi > 0.0 && lo > 1e-10 * hi {
        0.0
    } else {
        1e-6 * c.trace() / c.nrows() as f64
    }
}

/// `C^{-1/2}` and the numerical rank of `C`.
fn inv_sqrt(c: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = c.clone().symmetric_eigen();
    let hi = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 * hi.max(f64::MIN_POSITIVE);
    let mut rank = 0;
    let scaled: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l > floor {
                rank += 1;
                1.0 / l.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scaled));
    (v * d * v.transpose(), rank)
}

/// Canonical correlation analysis of two time-aligned trajectories (rows are ticks).
pub fn cca_shared_subspace(x: &[Vec<f64>], y: &[Vec<f64>], k: usize, ridge: Option<f64>) -> Result<SubspaceResult> {
    if x.len() != y.len() {
        return Err(MieError::usage(format!("trajectories have {} and {} rows", x.len(), y.len())));
    }
    let xm = to_matrix(x, "X")?;
    let ym = to_matrix(y, "Y")?;
    let t = xm.nrows();
    let (dx, dy) = (xm.ncols(), ym.ncols());
    if t < dx.max(dy) + 2 {
        return Err(MieError::InsufficientData(format!(
            "CCA needs at least {} time points, got {t}",
            dx.max(dy) + 2
        )));
    }
    if k == 0 || k > dx.min(dy) {
        return Err(MieError::usage(format!("component count must lie in 1..={}", dx.min(dy))));
    }
    let norm = 1.0 / (t as f64 - 1.0);
    let mut cxx = xm.transpose() * &xm * norm;
    let mut cyy = ym.transpose() * &ym * norm;
    let cxy = xm.transpose() * &ym * norm;
    let (rx, ry) = match ridge {
        Some(r) if r >= 0.0 => (r, r),
        Some(r) => return Err(MieError::usage(format!("ridge must be non-negative, got {r}"))),
        None => (auto_ridge(&cxx), auto_ridge(&cyy)),
    };
    for i in 0..dx {
        cxx[(i, i)] += rx;
    }
    for i in 0..dy {
        cyy[(i, i)] += ry;
    }
    let (wx, rank_x) = inv_sqrt(&cxx);
    let (wy, rank_y) = inv_sqrt(&cyy);
    if rank_x.min(rank_y) < k {
        return Err(MieError::numerical(
            format!("covariance rank {} is below the {k} requested components", rank_x.min(rank_y)),
            None,
        ));
    }
    let m = &wx * cxy * &wy;
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| MieError::numerical("SVD failed", None))?;
    let vt = svd.v_t.ok_or_else(|| MieError::numerical("SVD failed", None))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let order = &order[..k];
    let a = DMatrix::from_fn(dx, k, |i, c| (&wx * u.column(order[c]))[i]);
    let b = DMatrix::from_fn(dy, k, |i, c| (&wy * vt.row(order[c]).transpose())[i]);
    let sx = &xm * &a;
    let sy = &ym * &b;
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    Ok(SubspaceResult {
        correlations: order.iter().map(|&i| svd.singular_values[i].min(1.0)).collect(),
        x_weights: rows(&a),
        y_weights: rows(&b),
        x_scores: rows(&sx),
        y_scores: rows(&sy),
        ridge_x: rx,
        ridge_y: ry,
    })
}
