//! Physical constants, the shared fit report and the damped Gauss-Newton
//! (Levenberg-Marquardt) engine every fitting routine in the crate runs on.
//!
//! All public interfaces take cyclic frequencies in Hz. Where a formula needs
//! angular frequency the conversion is done locally and noted at that site.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const KB: f64 = 1.380_649e-23;
/// Magnetic flux quantum (Wb).
pub const PHI0: f64 = 2.067_833_848e-15;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Outcome of a least-squares fit.
///
/// `params` is populated with the last iterate even when `converged` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub residual_norm: f64,
    pub converged: bool,
    pub n_iter: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<String>,
    #[serde(skip)]
    pub covariance: Vec<Vec<f64>>,
}

impl FitReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn stderr_of(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.stderr[i])
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A residual vector with an optional analytic Jacobian.
pub trait Residuals {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, p: &[f64], out: &mut [f64]);

    /// Fill `jac` (n_residuals x n_params) and return true, or return false to
    /// fall back to central differences.
    fn jacobian(&self, _p: &[f64], _jac: &mut DMatrix<f64>) -> bool {
        false
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.n_params()).map(|i| format!("p{i}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LeastSquaresOptions {
    pub max_iter: usize,
    pub gtol: f64,
    pub xtol: f64,
    pub lambda0: f64,
    /// Per-parameter box; empty means unbounded.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for LeastSquaresOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            gtol: 1e-10,
            xtol: 1e-10,
            lambda0: 1e-3,
            bounds: Vec::new(),
        }
    }
}

impl LeastSquaresOptions {
    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = bounds;
        self
    }
}

fn clamp(p: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in p.iter_mut().zip(bounds) {
        *x = x.clamp(lo, hi);
    }
}

fn eval(model: &dyn Residuals, p: &DVector<f64>, buf: &mut [f64]) -> Option<f64> {
    model.residuals(p.as_slice(), buf);
    if buf.iter().all(|r| r.is_finite()) {
        Some(buf.iter().map(|r| r * r).sum())
    } else {
        None
    }
}

fn jacobian(model: &dyn Residuals, p: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let n = p.len();
    let mut jac = DMatrix::zeros(m, n);
    if model.jacobian(p.as_slice(), &mut jac) {
        return jac;
    }
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    let mut q = p.clone();
    for j in 0..n {
        let h = 1e-6 * p[j].abs().max(1e-9);
        q[j] = p[j] + h;
        model.residuals(q.as_slice(), &mut plus);
        q[j] = p[j] - h;
        model.residuals(q.as_slice(), &mut minus);
        q[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

fn scaled_norm(d: &DVector<f64>, v: &DVector<f64>) -> f64 {
    d.iter().zip(v.iter()).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt()
}

/// Minimize the sum of squared residuals of `model` starting from `init`.
///
/// Marquardt-scaled damping, lambda adapted by factors of ten. Stops on a
/// relative scaled step below `xtol`, a scaled gradient below `gtol`, or after
/// `max_iter` iterations (reported as `converged = false`).
pub fn least_squares(
    model: &dyn Residuals,
    init: &[f64],
    options: &LeastSquaresOptions,
) -> Result<FitReport> {
    let n = model.n_params();
    let m = model.n_residuals();
    if init.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} initial parameters, got {}",
            init.len()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("no observations"));
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite initial parameter"));
    }
    if !options.bounds.is_empty() && options.bounds.len() != n {
        return Err(Error::invalid("bounds length does not match parameter count"));
    }

    let mut p = DVector::from_column_slice(init);
    clamp(&mut p, &options.bounds);
    let mut r = vec![0.0; m];
    let mut cost = eval(model, &p, &mut r)
        .ok_or_else(|| Error::invalid("non-finite residual at initial parameters"))?;

    let mut lambda = options.lambda0;
    let mut converged = false;
    let mut n_iter = 0;
    let mut r_trial = vec![0.0; m];

    while n_iter < options.max_iter {
        n_iter += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let jac = jacobian(model, &p, m);
        let rv = DVector::from_column_slice(&r);
        let grad = jac.tr_mul(&rv);
        let jtj = jac.tr_mul(&jac);
        let diag: DVector<f64> = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                let v = jtj[(j, j)];
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            }),
        );
        let dscale = diag.map(f64::sqrt);

        let rnorm = cost.sqrt();
        let gmax = (0..n)
            .map(|j| grad[j].abs() / (dscale[j] * rnorm))
            .fold(0.0, f64::max);
        if gmax <= options.gtol {
            converged = true;
            break;
        }

        let pnorm = scaled_norm(&dscale, &p);
        let mut accepted = false;
        loop {
            let mut a = jtj.clone();
            for j in 0..n {
                a[(j, j)] += lambda * diag[j];
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e30 {
                        break;
                    }
                    continue;
                }
            };
            let mut trial = &p + &step;
            clamp(&mut trial, &options.bounds);
            let actual = &trial - &p;
            let small = scaled_norm(&dscale, &actual) <= options.xtol * (pnorm + options.xtol);
            match eval(model, &trial, &mut r_trial) {
                Some(c) if c < cost => {
                    p = trial;
                    cost = c;
                    std::mem::swap(&mut r, &mut r_trial);
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if small {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    if small {
                        converged = true;
                        break;
                    }
                    lambda *= 10.0;
                    if lambda > 1e30 {
                        break;
                    }
                }
            }
        }
        if converged || !accepted {
            // A failed inner loop without a tiny step means the damping blew up.
            break;
        }
    }

    let (stderr, covariance) = covariance(model, &p, m, cost);
    Ok(FitReport {
        names: model.param_names(),
        params: p.iter().copied().collect(),
        stderr,
        residual_norm: cost,
        converged,
        n_iter,
        verdicts: Vec::new(),
        covariance,
    })
}

/// Linearized covariance (J^T J)^-1 s^2 with s^2 = SSR / (m - n).
///
/// Directions the data do not constrain get infinite variance.
fn covariance(
    model: &dyn Residuals,
    p: &DVector<f64>,
    m: usize,
    cost: f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = p.len();
    let jac = jacobian(model, p, m);
    let jtj = jac.tr_mul(&jac);
    let d: Vec<f64> = (0..n)
        .map(|j| {
            let v = jtj[(j, j)];
            if v > 0.0 {
                v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let dof = if m > n { (m - n) as f64 } else { 1.0 };
    let s2 = cost / dof;

    let mut scaled = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if d[i] > 0.0 && d[j] > 0.0 {
                scaled[(i, j)] = jtj[(i, j)] / (d[i] * d[j]);
            }
        }
    }
    let eig = SymmetricEigen::new(scaled);
    let emax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = emax * 1e-14;
    let mut inv = DMatrix::zeros(n, n);
    let mut unconstrained: Vec<bool> = d.iter().map(|&x| x == 0.0).collect();
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if ev > cutoff {
            inv += (v * v.transpose()) / ev;
        } else {
            for j in 0..n {
                if v[j].abs() > 1e-8 {
                    unconstrained[j] = true;
                }
            }
        }
    }
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cov[i][j] = if unconstrained[i] || unconstrained[j] {
                if i == j {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                inv[(i, j)] * s2 / (d[i] * d[j])
            };
        }
    }
    let stderr = (0..n).map(|j| cov[j][j].max(0.0).sqrt()).collect();
    (stderr, cov)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn numeric_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("step must be positive"));
    }
    let hi = f(x + h);
    let lo = f(x - h);
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::invalid("non-finite function evaluation"));
    }
    Ok((hi - lo) / (2.0 * h))
}

/// Check a model's analytic Jacobian against central differences.
///
/// Returns the worst relative deviation, measured against each column's
/// largest entry.
pub fn jacobian_mismatch(model: &dyn Residuals, p: &[f64]) -> f64 {
    let n = model.n_params();
    let m = model.n_residuals();
    let mut analytic = DMatrix::zeros(m, n);
    assert!(model.jacobian(p, &mut analytic), "model has no analytic jacobian");
    let mut worst: f64 = 0.0;
    let mut q = p.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for j in 0..n {
        let h = 1e-6 * p[j].abs().max(1e-6);
        q[j] = p[j] + h;
        model.residuals(&q, &mut plus);
        q[j] = p[j] - h;
        model.residuals(&q, &mut minus);
        q[j] = p[j];
        let col_scale = (0..m).map(|i| analytic[(i, j)].abs()).fold(0.0, f64::max);
        if col_scale == 0.0 {
            continue;
        }
        for i in 0..m {
            let numeric = (plus[i] - minus[i]) / (2.0 * h);
            worst = worst.max((numeric - analytic[(i, j)]).abs() / col_scale);
        }
    }
    worst
}
