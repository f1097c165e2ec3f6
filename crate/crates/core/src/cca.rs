//! Regularized canonical correlation analysis between entity vectors and
//! image-region vectors.
//!
//! Fitting whitens both views with ridge-regularized covariances and takes
//! the SVD of the whitened cross-covariance. Projection matrices have their
//! columns scaled by the canonical correlations raised to a configurable
//! exponent, and projected vectors are L2-normalized.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::embed::{EntityVector, VectorKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CCAModel {
    pub x_mean: Array1<f64>,
    pub y_mean: Array1<f64>,
    /// dx x out_dim, columns already scaled by correlation^p.
    pub x_proj: Array2<f64>,
    /// dy x out_dim, columns already scaled by correlation^p.
    pub y_proj: Array2<f64>,
    /// Canonical correlations, descending, in [0, 1].
    pub correlations: Array1<f64>,
    /// Ridge strength relative to the mean covariance diagonal.
    pub eta: f64,
    /// Correlation scaling exponent.
    pub p: f64,
}

impl CCAModel {
    pub fn out_dim(&self) -> usize {
        self.x_proj.ncols()
    }

    pub fn x_dim(&self) -> usize {
        self.x_proj.nrows()
    }

    pub fn y_dim(&self) -> usize {
        self.y_proj.nrows()
    }
}

/// Default relative ridge.
pub const DEFAULT_ETA: f64 = 1e-4;

/// Fit regularized CCA on paired rows of `x` (entity view) and `y`
/// (region view).
///
/// `eta` is relative to the mean covariance diagonal of each view; zero is
/// allowed only for full-rank covariances. `p` scales projection columns by
/// correlation^p.
pub fn fit_cca(
    x: &Array2<f64>,
    y: &Array2<f64>,
    out_dim: usize,
    eta: f64,
    p: f64,
) -> Result<CCAModel> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::Dimension(format!(
            "paired views need equal rows, got {} and {}",
            n,
            y.nrows()
        )));
    }
    let dx = x.ncols();
    let dy = y.ncols();
    if out_dim == 0 || out_dim > dx.min(dy) {
        return Err(Error::invalid(format!(
            "out_dim {out_dim} must be in 1..=min({dx}, {dy})"
        )));
    }
    if n <= out_dim {
        return Err(Error::invalid(format!(
            "sample size {n} must exceed out_dim {out_dim}"
        )));
    }
    if eta < 0.0 {
        return Err(Error::invalid("eta must be non-negative"));
    }

    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let xc = centered(x, &x_mean);
    let yc = centered(y, &y_mean);

    let denom = (n - 1) as f64;
    let cxx = &xc.transpose() * &xc / denom;
    let cyy = &yc.transpose() * &yc / denom;
    let cxy = &xc.transpose() * &yc / denom;

    let wx = inv_sqrt(&cxx, eta)?;
    let wy = inv_sqrt(&cyy, eta)?;

    // whitened cross-covariance; singular values are the correlations
    let m = &wx * &cxy * &wy;
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::invalid("SVD failed"))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::invalid("SVD failed"))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut correlations = Array1::zeros(out_dim);
    let mut x_proj = Array2::zeros((dx, out_dim));
    let mut y_proj = Array2::zeros((dy, out_dim));
    for (c, &idx) in order.iter().take(out_dim).enumerate() {
        let rho = svd.singular_values[idx].clamp(0.0, 1.0 + 1e-6).min(1.0);
        correlations[c] = rho;
        let scale = rho.powf(p);
        // deterministic sign: largest-magnitude entry of the u column positive
        let mut sign = 1.0;
        let mut best = 0.0;
        for r in 0..u.nrows() {
            if u[(r, idx)].abs() > best {
                best = u[(r, idx)].abs();
                sign = u[(r, idx)].signum();
            }
        }
        for r in 0..dx {
            let mut acc = 0.0;
            for t in 0..dx {
                acc += wx[(r, t)] * u[(t, idx)];
            }
            x_proj[(r, c)] = acc * sign * scale;
        }
        for r in 0..dy {
            let mut acc = 0.0;
            for t in 0..dy {
                acc += wy[(r, t)] * vt[(idx, t)];
            }
            y_proj[(r, c)] = acc * sign * scale;
        }
    }
    Ok(CCAModel {
        x_mean,
        y_mean,
        x_proj,
        y_proj,
        correlations,
        eta,
        p,
    })
}

fn centered(a: &Array2<f64>, mean: &Array1<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - mean[j])
}

/// Symmetric inverse square root of `c + eta * mean(diag(c)) * I`.
fn inv_sqrt(c: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    let d = c.nrows();
    let mean_diag = (0..d).map(|i| c[(i, i)]).sum::<f64>() / d as f64;
    let ridge = eta * mean_diag;
    let mut reg = c.clone();
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let eig = reg.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = max_eig * 1e-12;
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let lambda = eig.eigenvalues[k];
        if lambda <= floor {
            return Err(Error::invalid(
                "rank-deficient covariance; set eta > 0 to regularize",
            ));
        }
        let inv = 1.0 / lambda.sqrt();
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += eig.eigenvectors[(i, k)] * inv * eig.eigenvectors[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Project an entity vector: center, project with the scaled matrix, then
/// L2-normalize. A zero projection comes back zero with the flag set,
/// mirroring the cosine convention.
pub fn project_entity(v: &ArrayView1<f64>, model: &CCAModel) -> Result<EntityVector> {
    if v.len() != model.x_dim() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match entity view dim {}",
            v.len(),
            model.x_dim()
        )));
    }
    let centered = v - &model.x_mean;
    let mut out = Array1::zeros(model.out_dim());
    for c in 0..model.out_dim() {
        let mut acc = 0.0;
        for r in 0..model.x_dim() {
            acc += model.x_proj[(r, c)] * centered[r];
        }
        out[c] = acc;
    }
    let norm = out.dot(&out).sqrt();
    let zero = norm <= 1e-12;
    if !zero {
        out /= norm;
    }
    Ok(EntityVector {
        key: String::new(),
        kind: VectorKind::Cca,
        values: out,
        oov: zero,
    })
}

/// Project a region vector the same way (for tests and inspection).
pub fn project_region(v: &ArrayView1<f64>, model: &CCAModel) -> Result<Array1<f64>> {
    if v.len() != model.y_dim() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match region view dim {}",
            v.len(),
            model.y_dim()
        )));
    }
    let centered = v - &model.y_mean;
    let mut out = Array1::zeros(model.out_dim());
    for c in 0..model.out_dim() {
        let mut acc = 0.0;
        for r in 0..model.y_dim() {
            acc += model.y_proj[(r, c)] * centered[r];
        }
        out[c] = acc;
    }
    let norm = out.dot(&out).sqrt();
    if norm > 1e-12 {
        out /= norm;
    }
    Ok(out)
}
