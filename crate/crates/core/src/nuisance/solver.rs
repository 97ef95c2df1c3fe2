//! Dense regression solvers shared by the nuisance fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsSettings {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsSettings {
    fn default() -> Self {
        Self { ridge: 1e-8, tol: 1e-9, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// Max-norm of the penalized gradient at the returned coefficients.
    pub gradient_norm: f64,
}

#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

// Mean log-likelihood minus (ridge/2)|beta|^2.
fn objective(design: &DMatrix<f64>, labels: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = design * beta;
    let n = labels.len() as f64;
    let ll: f64 = eta.iter().zip(labels).map(|(e, y)| y * e - softplus(*e)).sum();
    ll / n - 0.5 * ridge * beta.norm_squared()
}

fn gradient(design: &DMatrix<f64>, labels: &[f64], beta: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let eta = design * beta;
    let n = labels.len() as f64;
    let resid = DVector::from_iterator(
        labels.len(),
        eta.iter().zip(labels).map(|(e, y)| y - expit(*e)),
    );
    design.tr_mul(&resid) / n - beta * ridge
}

/// Ridge-penalized logistic regression by Newton–Raphson (IRLS) with step halving.
///
/// Maximizes `(1/n) Σ [y η - log(1 + e^η)] - (ridge/2)|β|²` and stops once the
/// gradient max-norm drops below `tol`.
pub fn irls_logistic(
    design: &DMatrix<f64>,
    labels: &[f64],
    ridge: f64,
    tol: f64,
    max_iter: usize,
) -> Result<IrlsFit> {
    let (n, q) = design.shape();
    if labels.len() != n {
        return Err(invalid(format!("design has {n} rows but {} labels", labels.len())));
    }
    if n < q {
        return Err(invalid(format!("need n >= q, got n = {n}, q = {q}")));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("logistic labels must be 0 or 1"));
    }
    if !(ridge >= 0.0 && tol > 0.0) {
        return Err(invalid("ridge must be >= 0 and tol > 0"));
    }

    let nf = n as f64;
    let mut beta = DVector::zeros(q);
    let mut obj = objective(design, labels, &beta, ridge);
    let mut grad = gradient(design, labels, &beta, ridge);
    let mut gnorm = grad.amax();
    for iter in 0..max_iter {
        if gnorm < tol {
            return Ok(IrlsFit { coefficients: beta.as_slice().to_vec(), iterations: iter, gradient_norm: gnorm });
        }
        let eta = design * &beta;
        let mut weighted = design.clone();
        for (mut row, e) in weighted.row_iter_mut().zip(eta.iter()) {
            let p = expit(*e);
            row *= p * (1.0 - p);
        }
        let mut info = design.tr_mul(&weighted) / nf;
        for k in 0..q {
            info[(k, k)] += ridge;
        }
        let chol = info.cholesky().filter(well_conditioned).ok_or_else(|| {
            Error::Singular("weighted normal equations are not positive definite (try a larger ridge)".into())
        })?;
        let step = chol.solve(&grad);

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &beta + &step * scale;
            let cand_obj = objective(design, labels, &cand, ridge);
            if cand_obj >= obj - 1e-15 * obj.abs().max(1.0) {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        grad = gradient(design, labels, &beta, ridge);
        gnorm = grad.amax();
        if !accepted && gnorm >= tol {
            return Err(Error::NonConvergence { iterations: iter + 1, gradient_norm: gnorm });
        }
    }
    if gnorm < tol {
        return Ok(IrlsFit { coefficients: beta.as_slice().to_vec(), iterations: max_iter, gradient_norm: gnorm });
    }
    Err(Error::NonConvergence { iterations: max_iter, gradient_norm: gnorm })
}

// Ratio of smallest to largest Cholesky pivot; near zero means numerically singular.
fn well_conditioned(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> bool {
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = (d.min(), d.max());
    hi > 0.0 && lo / hi > 1e-7
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    pub rss: f64,
}

/// Ordinary least squares through the normal equations.
pub fn least_squares(design: &DMatrix<f64>, response: &[f64]) -> Result<LeastSquaresFit> {
    let (n, q) = design.shape();
    if response.len() != n {
        return Err(invalid(format!("design has {n} rows but {} responses", response.len())));
    }
    if n < q {
        return Err(invalid(format!("need n >= q, got n = {n}, q = {q}")));
    }
    let y = DVector::from_column_slice(response);
    let gram = design.tr_mul(design);
    let rhs = design.tr_mul(&y);
    let chol = gram
        .clone()
        .cholesky()
        .filter(well_conditioned)
        .ok_or_else(|| Error::Singular("normal equations are singular".into()))?;
    let mut beta = chol.solve(&rhs);
    // one step of iterative refinement
    let r = &rhs - &gram * &beta;
    beta += chol.solve(&r);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Singular("normal equations are singular".into()));
    }
    let resid = &y - design * &beta;
    Ok(LeastSquaresFit { coefficients: beta.as_slice().to_vec(), rss: resid.norm_squared() })
}
