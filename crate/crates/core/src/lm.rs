//! Levenberg–Marquardt nonlinear least squares with finite-difference Jacobians.
//!
//! All the curve fits in this crate go through [`minimize`]. Residual
//! functions return `None` for parameter vectors outside the model's domain;
//! such trial steps are rejected like any other uphill step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceScaling {
    /// Scale `(JᵀJ)⁻¹` by the reduced chi-square (residual variance unknown).
    ReducedChiSquare,
    /// Residuals are already divided by known standard deviations.
    Absolute,
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step changes every parameter by less than
    /// `xtol·(|θ| + xtol)`.
    pub xtol: f64,
    /// Stop when an accepted step lowers the residual sum of squares by less
    /// than this relative amount.
    pub ftol: f64,
    /// Relative step of the central-difference Jacobian.
    pub fd_step: f64,
    pub covariance: CovarianceScaling,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            xtol: 1e-12,
            ftol: 1e-15,
            fd_step: 1e-6,
            covariance: CovarianceScaling::ReducedChiSquare,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// 1σ uncertainties, square roots of the covariance diagonal.
    pub sigmas: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub residuals: Vec<f64>,
    /// Residual sum of squares.
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} data points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("residuals are not finite at the initial guess")]
    BadInitialGuess,
    #[error("fit did not converge within {} iterations (rss = {:e})", .0.iterations, .0.rss)]
    NotConverged(Box<LmReport>),
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
}

impl FitError {
    /// The best-so-far estimate of an unconverged fit.
    pub fn best_so_far(&self) -> Option<&LmReport> {
        match self {
            FitError::NotConverged(r) => Some(r),
            _ => None,
        }
    }
}

fn rss(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn evaluate<F>(f: &F, theta: &[f64]) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    f(theta).filter(|r| r.iter().all(|x| x.is_finite()))
}

fn jacobian<F>(f: &F, theta: &[f64], m: usize, step: f64) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = theta.len();
    let mut j = DMatrix::zeros(m, n);
    let mut probe = theta.to_vec();
    for k in 0..n {
        let h = step * theta[k].abs().max(step);
        probe[k] = theta[k] + h;
        let up = evaluate(f, &probe);
        probe[k] = theta[k] - h;
        let down = evaluate(f, &probe);
        probe[k] = theta[k];
        let (col, denom) = match (up, down) {
            (Some(u), Some(d)) => (
                u.iter().zip(&d).map(|(a, b)| a - b).collect::<Vec<_>>(),
                2.0 * h,
            ),
            (Some(u), None) => {
                let c = evaluate(f, theta)?;
                (u.iter().zip(&c).map(|(a, b)| a - b).collect(), h)
            }
            (None, Some(d)) => {
                let c = evaluate(f, theta)?;
                (c.iter().zip(&d).map(|(a, b)| a - b).collect(), h)
            }
            (None, None) => return None,
        };
        for i in 0..m {
            j[(i, k)] = col[i] / denom;
        }
    }
    Some(j)
}

fn solve_normal(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.clone().lu().solve(b)
}

fn covariance(j: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let n = j.ncols();
    let jtj = j.transpose() * j;
    let inv = jtj
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| jtj.clone().try_inverse())
        .or_else(|| jtj.pseudo_inverse(1e-300).ok())
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    inv * scale
}

/// Minimizes `Σ r_i(θ)²` starting from `initial`.
///
/// Deterministic: identical inputs give bit-identical outputs. An exhausted
/// iteration budget yields [`FitError::NotConverged`] carrying the best
/// parameters found.
pub fn minimize<F>(residuals: F, initial: &[f64], opts: &LmOptions) -> Result<LmReport, FitError>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = initial.len();
    let mut theta = initial.to_vec();
    let mut r = evaluate(&residuals, &theta).ok_or(FitError::BadInitialGuess)?;
    let m = r.len();
    if m < n {
        return Err(FitError::TooFewPoints { needed: n, got: m });
    }
    let mut cost = rss(&r);
    let mut lambda = 1e-3;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let j = match jacobian(&residuals, &theta, m, opts.fd_step) {
            Some(j) => j,
            None => break,
        };
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        let max_diag = (0..n).map(|k| a[(k, k)]).fold(0.0, f64::max);
        if max_diag == 0.0 {
            // Residuals do not depend on the parameters at all.
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda <= 1e16 {
            let mut damped = a.clone();
            for k in 0..n {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-12 * max_diag);
            }
            let step = match solve_normal(&damped, &(-&g)) {
                Some(s) if s.iter().all(|x| x.is_finite()) => s,
                _ => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            match evaluate(&residuals, &trial) {
                Some(rt) if rss(&rt) <= cost => {
                    let new_cost = rss(&rt);
                    let small_step = theta
                        .iter()
                        .zip(step.iter())
                        .all(|(t, s)| s.abs() <= opts.xtol * (t.abs() + opts.xtol));
                    let small_gain = cost - new_cost <= opts.ftol * cost;
                    theta = trial;
                    r = rt;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if small_step || small_gain || cost == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No downhill direction at any damping: a numerical minimum.
            converged = true;
        }
    }

    let scale = match opts.covariance {
        CovarianceScaling::Absolute => 1.0,
        CovarianceScaling::ReducedChiSquare => {
            if m > n {
                cost / (m - n) as f64
            } else {
                0.0
            }
        }
    };
    let cov = match jacobian(&residuals, &theta, m, opts.fd_step) {
        Some(j) => covariance(&j, scale),
        None => DMatrix::from_element(n, n, f64::NAN),
    };
    let sigmas = (0..n).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let report = LmReport {
        params: theta,
        sigmas,
        covariance: cov,
        residuals: r,
        rss: cost,
        iterations,
        converged,
    };
    if converged {
        Ok(report)
    } else {
        Err(FitError::NotConverged(Box::new(report)))
    }
}
