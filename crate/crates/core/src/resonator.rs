//! Notch-type S21 model, environment de-embedding and circle-fit extraction
//! of resonator quality factors.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phys::{least_squares, FitReport, LeastSquaresOptions, Residuals, TWO_PI};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Complex transmission sampled on a strictly increasing frequency grid (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexTrace {
    pub freqs: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl ComplexTrace {
    pub fn new(freqs: Vec<f64>, values: Vec<Complex64>) -> Result<Self> {
        let t = Self { freqs, values };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs.len() != self.values.len() {
            return Err(Error::invalid("freqs and values differ in length"));
        }
        if self.freqs.iter().any(|f| !f.is_finite())
            || self.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(Error::invalid("non-finite sample in trace"));
        }
        if self.freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("frequencies must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Intrinsic notch resonator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NotchParams {
    pub q_loaded: f64,
    pub q_coupling_abs: f64,
    /// Impedance-mismatch angle (rad).
    pub phi0: f64,
    pub f_res: f64,
}

impl NotchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_loaded > 0.0 && self.q_coupling_abs > 0.0 && self.f_res > 0.0) {
            return Err(Error::invalid("quality factors and resonance must be positive"));
        }
        if self.phi0.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::invalid("|phi0| must be below pi/2"));
        }
        q_internal(self, QiConvention::DiameterCorrection).map(|_| ())
    }
}

/// Frequency-independent attenuation, global phase and cable delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentParams {
    pub amp: f64,
    /// rad
    pub alpha: f64,
    /// s
    pub tau: f64,
}

impl EnvironmentParams {
    pub const IDENTITY: Self = Self {
        amp: 1.0,
        alpha: 0.0,
        tau: 0.0,
    };
}

pub fn s21_ideal(np: &NotchParams, freq: f64) -> Complex64 {
    let k = Complex64::from_polar(np.q_loaded / np.q_coupling_abs, np.phi0);
    let y = 2.0 * np.q_loaded * (freq - np.f_res) / np.f_res;
    Complex64::new(1.0, 0.0) - k / (Complex64::new(1.0, y))
}

/// `a e^{i alpha} e^{-i 2 pi f tau}` times the ideal response.
pub fn s21_full(np: &NotchParams, env: &EnvironmentParams, freq: f64) -> Complex64 {
    environment(env, freq) * s21_ideal(np, freq)
}

fn environment(env: &EnvironmentParams, freq: f64) -> Complex64 {
    Complex64::from_polar(env.amp, env.alpha - TWO_PI * freq * env.tau)
}

/// Sample `s21_full` on `freqs`, optionally adding independent Gaussian noise
/// of standard deviation `sigma` to the real and imaginary parts.
pub fn synthesize_s21(
    np: &NotchParams,
    env: &EnvironmentParams,
    freqs: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<ComplexTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let values = freqs
        .iter()
        .map(|&f| {
            let v = s21_full(np, env, f);
            if sigma > 0.0 {
                v + Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                v
            }
        })
        .collect();
    ComplexTrace::new(freqs.to_vec(), values)
}

/// Evenly spaced grid of `n` points centred on `center` spanning `span`.
pub fn linear_grid(center: f64, span: f64, n: usize) -> Vec<f64> {
    let step = span / (n.max(2) - 1) as f64;
    (0..n).map(|i| center - 0.5 * span + step * i as f64).collect()
}

/// How the internal quality factor is derived from the loaded and coupling Q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QiConvention {
    /// `1/Q_int = 1/Q_l - cos(phi0)/|Q_c|`
    #[default]
    DiameterCorrection,
    /// `1/Q_int = 1/Q_l - 1/|Q_c|`
    SimpleReciprocal,
}

pub fn q_internal(np: &NotchParams, convention: QiConvention) -> Result<f64> {
    let coupling = match convention {
        QiConvention::DiameterCorrection => np.phi0.cos() / np.q_coupling_abs,
        QiConvention::SimpleReciprocal => 1.0 / np.q_coupling_abs,
    };
    let inv = 1.0 / np.q_loaded - coupling;
    if inv <= 0.0 {
        return Err(Error::domain("coupling term exceeds 1/Q_l: negative internal Q"));
    }
    Ok(1.0 / inv)
}

/// Real part of the complex coupling Q, `|Q_c| / cos(phi0)`.
pub fn q_coupling_real(np: &NotchParams) -> f64 {
    np.q_coupling_abs / np.phi0.cos()
}

/// Decay rate (Hz) for a quality factor.
pub fn kappa_from_q(f_res: f64, q: f64) -> f64 {
    f_res / q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleFit {
    pub notch: NotchParams,
    pub env: EnvironmentParams,
    pub report: FitReport,
}

#[derive(Debug, Clone, Copy)]
struct Circle {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Taubin algebraic circle fit (Newton iteration on the characteristic
/// polynomial of the centred moment matrix).
fn taubin(points: &[Complex64]) -> Option<Circle> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.re).sum::<f64>() / n;
    let my = points.iter().map(|p| p.im).sum::<f64>() / n;
    let (mut mxx, mut myy, mut mxy, mut mxz, mut myz, mut mzz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let x = p.re - mx;
        let y = p.im - my;
        let z = x * x + y * y;
        mxx += x * x;
        myy += y * y;
        mxy += x * y;
        mxz += x * z;
        myz += y * z;
        mzz += z * z;
    }
    mxx /= n;
    myy /= n;
    mxy /= n;
    mxz /= n;
    myz /= n;
    mzz /= n;
    let mz = mxx + myy;
    let cov_xy = mxx * myy - mxy * mxy;
    let var_z = mzz - mz * mz;
    let a3 = 4.0 * mz;
    let a2 = -3.0 * mz * mz - mzz;
    let a1 = var_z * mz + 4.0 * cov_xy * mz - mxz * mxz - myz * myz;
    let a0 = mxz * (mxz * myy - myz * mxy) + myz * (myz * mxx - mxz * mxy) - var_z * cov_xy;
    let a22 = 2.0 * a2;
    let a33 = 3.0 * a3;

    let mut x = 0.0;
    let mut y = a0;
    for _ in 0..100 {
        let dy = a1 + x * (a22 + a33 * x);
        let xnew = x - y / dy;
        if xnew == x || !xnew.is_finite() {
            break;
        }
        let ynew = a0 + xnew * (a1 + xnew * (a2 + xnew * a3));
        if ynew.abs() >= y.abs() {
            break;
        }
        x = xnew;
        y = ynew;
    }
    let det = x * x - x * mz + cov_xy;
    let xc = (mxz * (myy - x) - myz * mxy) / det / 2.0;
    let yc = (myz * (mxx - x) - mxz * mxy) / det / 2.0;
    let r = (xc * xc + yc * yc + mz).sqrt();
    let c = Circle {
        cx: xc + mx,
        cy: yc + my,
        r,
    };
    (c.cx.is_finite() && c.cy.is_finite() && c.r.is_finite()).then_some(c)
}

fn radial_residuals(points: &[Complex64], c: &Circle, out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(points) {
        *o = (p - Complex64::new(c.cx, c.cy)).norm() - c.r;
    }
}

fn unwrap(phases: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for p in phases {
        match out.last() {
            None => out.push(p),
            Some(&prev) => {
                let d = (p - prev + std::f64::consts::PI).rem_euclid(TWO_PI) - std::f64::consts::PI;
                out.push(prev + d);
            }
        }
    }
    out
}

fn wrap_angle(x: f64) -> f64 {
    let w = (x + std::f64::consts::PI).rem_euclid(TWO_PI) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + TWO_PI
    } else {
        w
    }
}

/// Common slope of the unwrapped phase over the outer fifth of the trace on
/// each side, each side with its own intercept.
fn delay_from_edges(offsets: &[f64], phase: &[f64]) -> f64 {
    let n = offsets.len();
    let edge = (n / 5).max(2);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for range in [0..edge, n - edge..n] {
        let k = range.len() as f64;
        let xm = offsets[range.clone()].iter().sum::<f64>() / k;
        let ym = phase[range.clone()].iter().sum::<f64>() / k;
        for i in range {
            sxy += (offsets[i] - xm) * (phase[i] - ym);
            sxx += (offsets[i] - xm).powi(2);
        }
    }
    -(sxy / sxx) / TWO_PI
}

fn remove_delay(values: &[Complex64], offsets: &[f64], tau: f64) -> Vec<Complex64> {
    values
        .iter()
        .zip(offsets)
        .map(|(v, x)| v * Complex64::from_polar(1.0, TWO_PI * x * tau))
        .collect()
}

struct DelayProblem<'a> {
    values: &'a [Complex64],
    offsets: &'a [f64],
}

impl Residuals for DelayProblem<'_> {
    fn n_params(&self) -> usize {
        1
    }
    fn n_residuals(&self) -> usize {
        self.values.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let pts = remove_delay(self.values, self.offsets, p[0]);
        match taubin(&pts) {
            Some(c) => radial_residuals(&pts, &c, out),
            None => out.iter_mut().for_each(|o| *o = f64::NAN),
        }
    }
}

/// theta0, q_loaded, f_res offset from the reference frequency.
struct PhaseProblem<'a> {
    offsets: &'a [f64],
    theta: &'a [f64],
    f_ref: f64,
}

impl PhaseProblem<'_> {
    fn model(&self, p: &[f64], x: f64) -> f64 {
        let fr = self.f_ref + p[2];
        p[0] + 2.0 * (2.0 * p[1] * (p[2] - x) / fr).atan()
    }
}

impl Residuals for PhaseProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.offsets.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.offsets.len() {
            out[i] = self.model(p, self.offsets[i]) - self.theta[i];
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let fr = self.f_ref + p[2];
        for (i, &x) in self.offsets.iter().enumerate() {
            let f = self.f_ref + x;
            let u = 2.0 * p[1] * (p[2] - x) / fr;
            let d = 2.0 / (1.0 + u * u);
            jac[(i, 0)] = 1.0;
            jac[(i, 1)] = d * 2.0 * (p[2] - x) / fr;
            jac[(i, 2)] = d * 2.0 * p[1] * f / (fr * fr);
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        vec!["theta0".into(), "q_loaded".into(), "f_res_offset".into()]
    }
}

/// Joint model on the complex data, residuals stacked re then im.
/// Parameters: amp, alpha at the reference frequency, tau, f_res offset,
/// phi0, q_loaded, |q_c|.
pub(crate) struct FullS21Problem<'a> {
    pub offsets: &'a [f64],
    pub values: &'a [Complex64],
    pub f_ref: f64,
}

impl FullS21Problem<'_> {
    fn parts(&self, p: &[f64], x: f64) -> (Complex64, Complex64, Complex64, f64) {
        let fr = self.f_ref + p[3];
        let f = self.f_ref + x;
        let env = Complex64::from_polar(p[0], p[1] - TWO_PI * x * p[2]);
        let k = Complex64::from_polar(p[5] / p[6], p[4]);
        let y = 2.0 * p[5] * (x - p[3]) / fr;
        (env, k, Complex64::new(1.0, y), f)
    }
}

impl Residuals for FullS21Problem<'_> {
    fn n_params(&self) -> usize {
        7
    }
    fn n_residuals(&self) -> usize {
        2 * self.offsets.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let n = self.offsets.len();
        for i in 0..n {
            let (env, k, den, _) = self.parts(p, self.offsets[i]);
            let m = env * (Complex64::new(1.0, 0.0) - k / den) - self.values[i];
            out[i] = m.re;
            out[n + i] = m.im;
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let n = self.offsets.len();
        let fr = self.f_ref + p[3];
        for i in 0..n {
            let x = self.offsets[i];
            let (env, k, den, f) = self.parts(p, x);
            let s = Complex64::new(1.0, 0.0) - k / den;
            let m = env * s;
            let den2 = den * den;
            let dy_dql = 2.0 * (x - p[3]) / fr;
            let dy_dfr = -2.0 * p[5] * f / (fr * fr);
            let cols = [
                m / p[0],
                I * m,
                -I * TWO_PI * x * m,
                env * k * I * dy_dfr / den2,
                env * (-I * k / den),
                env * (-(k / p[5]) / den + k * I * dy_dql / den2),
                env * ((k / p[6]) / den),
            ];
            for (j, c) in cols.iter().enumerate() {
                jac[(i, j)] = c.re;
                jac[(n + i, j)] = c.im;
            }
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        ["amp", "alpha_ref", "tau", "f_res_offset", "phi0", "q_loaded", "q_coupling_abs"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Extract notch and environment parameters from a complex S21 trace.
///
/// 1. cable delay from the off-resonant phase slope, refined by making the
///    de-delayed data as circular as possible;
/// 2. Taubin circle through the de-delayed data;
/// 3. phase-vs-frequency arctan fit about the circle centre for Q_l, f_res;
/// 4. |Q_c|, phi0, a and alpha from the circle geometry;
/// 5. joint least-squares refinement of all seven parameters.
pub fn circle_fit(trace: &ComplexTrace) -> Result<CircleFit> {
    trace.validate()?;
    let n = trace.len();
    if n < 8 {
        return Err(Error::invalid("circle fit needs at least 8 points"));
    }
    let f_ref = 0.5 * (trace.freqs[0] + trace.freqs[n - 1]);
    let offsets: Vec<f64> = trace.freqs.iter().map(|f| f - f_ref).collect();
    let values = &trace.values;

    // 1. delay
    let phase = unwrap(values.iter().map(|v| v.arg()));
    let tau0 = delay_from_edges(&offsets, &phase);
    let scale = values.iter().map(|v| v.norm()).sum::<f64>() / n as f64;
    let mut pts = remove_delay(values, &offsets, tau0);
    let centroid = pts.iter().sum::<Complex64>() / n as f64;
    let spread = (pts.iter().map(|p| (p - centroid).norm_sqr()).sum::<f64>() / n as f64).sqrt();
    if !(spread > 1e-6 * scale) {
        return Err(Error::fit("no discernible resonance circle in trace"));
    }
    let mut tau = tau0;
    let delay_problem = DelayProblem {
        values,
        offsets: &offsets,
    };
    if let Ok(rep) = least_squares(&delay_problem, &[tau0], &LeastSquaresOptions::default()) {
        let mut r0 = vec![0.0; n];
        delay_problem.residuals(&[tau0], &mut r0);
        let c0: f64 = r0.iter().map(|r| r * r).sum();
        if rep.params[0].is_finite() && rep.residual_norm <= c0 {
            tau = rep.params[0];
            pts = remove_delay(values, &offsets, tau);
        }
    }

    // 2. circle
    let circle = taubin(&pts).ok_or_else(|| Error::fit("circle fit degenerate"))?;
    let mut radial = vec![0.0; n];
    radial_residuals(&pts, &circle, &mut radial);
    let scatter = (radial.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    if !(circle.r > 5.0 * scatter) || circle.r > 1e3 * scale {
        return Err(Error::fit(format!(
            "no discernible circle: radius {:.3e} vs scatter {:.3e}",
            circle.r, scatter
        )));
    }
    let center = Complex64::new(circle.cx, circle.cy);

    // 3. phase about the centre
    let theta = unwrap(pts.iter().map(|p| (p - center).arg()));
    let coverage = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - theta.iter().cloned().fold(f64::INFINITY, f64::min);
    if coverage < std::f64::consts::PI {
        return Err(Error::fit(format!(
            "no discernible circle: data cover only {coverage:.2} rad of arc"
        )));
    }
    let i_min = (0..n)
        .min_by(|&a, &b| pts[a].norm().total_cmp(&pts[b].norm()))
        .unwrap_or(n / 2);
    let theta_res = theta[i_min];
    let f_lo = (0..=i_min)
        .rev()
        .find(|&i| theta[i] >= theta_res + std::f64::consts::FRAC_PI_2)
        .map(|i| trace.freqs[i])
        .unwrap_or(trace.freqs[0]);
    let f_hi = (i_min..n)
        .find(|&i| theta[i] <= theta_res - std::f64::consts::FRAC_PI_2)
        .map(|i| trace.freqs[i])
        .unwrap_or(trace.freqs[n - 1]);
    let fr0 = trace.freqs[i_min];
    let ql0 = fr0 / (f_hi - f_lo).max(trace.freqs[1] - trace.freqs[0]);
    let phase_problem = PhaseProblem {
        offsets: &offsets,
        theta: &theta,
        f_ref,
    };
    let opts = LeastSquaresOptions::default().with_bounds(vec![
        (f64::NEG_INFINITY, f64::INFINITY),
        (1.0, f64::INFINITY),
        (offsets[0], offsets[n - 1]),
    ]);
    let phase_fit = least_squares(&phase_problem, &[theta_res, ql0, offsets[i_min]], &opts)?;
    let (theta0, ql, fr_off) = (phase_fit.params[0], phase_fit.params[1], phase_fit.params[2]);

    // 4. geometry
    let off_res = center + Complex64::from_polar(circle.r, theta0 + std::f64::consts::PI);
    let amp = off_res.norm();
    let alpha_ref = off_res.arg();
    let qc = ql * amp / (2.0 * circle.r);
    let phi0 = wrap_angle(theta0 + std::f64::consts::PI - alpha_ref);

    // 5. joint refinement
    let full = FullS21Problem {
        offsets: &offsets,
        values,
        f_ref,
    };
    let init = [amp, alpha_ref, tau, fr_off, phi0, ql, qc];
    let opts = LeastSquaresOptions::default().with_bounds(vec![
        (0.0, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (offsets[0], offsets[n - 1]),
        (-1.5, 1.5),
        (1.0, f64::INFINITY),
        (1.0, f64::INFINITY),
    ]);
    let rep = least_squares(&full, &init, &opts)?;
    let p = &rep.params;

    let notch = NotchParams {
        q_loaded: p[5],
        q_coupling_abs: p[6],
        phi0: p[4],
        f_res: f_ref + p[3],
    };
    let env = EnvironmentParams {
        amp: p[0],
        alpha: wrap_angle(p[1] + TWO_PI * f_ref * p[2]),
        tau: p[2],
    };

    // Re-express the report in absolute terms.
    let mut report = rep.clone();
    report.names = ["amp", "alpha", "tau", "f_res", "phi0", "q_loaded", "q_coupling_abs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    report.params = vec![env.amp, env.alpha, env.tau, notch.f_res, notch.phi0, notch.q_loaded, notch.q_coupling_abs];
    let w = TWO_PI * f_ref;
    let cov = &rep.covariance;
    let var_alpha = cov[1][1] + w * w * cov[2][2] + 2.0 * w * cov[1][2];
    report.stderr[1] = var_alpha.max(0.0).sqrt();
    if notch.validate().is_err() {
        report
            .verdicts
            .push("fitted parameters imply a non-positive internal Q".into());
    }
    Ok(CircleFit { notch, env, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phys::jacobian_mismatch;
    use proptest::prelude::*;

    pub(crate) fn table_s1() -> (NotchParams, EnvironmentParams) {
        (
            NotchParams {
                q_loaded: 2913.0,
                q_coupling_abs: 5758.0,
                phi0: 0.23,
                f_res: 8.1672e9,
            },
            EnvironmentParams {
                amp: 0.32,
                alpha: -0.56,
                tau: 69.8e-9,
            },
        )
    }

    #[test]
    fn ideal_at_resonance() {
        let (np, _) = table_s1();
        let v = s21_ideal(&np, np.f_res);
        assert!((v.re - 0.5074).abs() < 1e-4 && (v.im + 0.1153).abs() < 1e-4, "{v}");
        let far = s21_ideal(&np, np.f_res * 1.5);
        assert!((far - Complex64::new(1.0, 0.0)).norm() < 1e-3);
        let matched = NotchParams {
            q_loaded: 1000.0,
            q_coupling_abs: 2000.0,
            phi0: 0.0,
            f_res: 5e9,
        };
        assert!((s21_ideal(&matched, 5e9) - Complex64::new(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn full_model_environment() {
        let (np, env) = table_s1();
        for f in [8.16e9, np.f_res, 8.17e9] {
            let a = s21_full(&np, &EnvironmentParams::IDENTITY, f);
            assert!((a - s21_ideal(&np, f)).norm() < 1e-15);
            let b = s21_full(&np, &env, f);
            assert!((b.norm() - 0.32 * a.norm()).abs() < 1e-12);
            let rotated = EnvironmentParams { alpha: 1.0, tau: 10e-9, ..env };
            assert!((s21_full(&np, &rotated, f).norm() - b.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn internal_q_conventions() {
        let (np, _) = table_s1();
        let simple = q_internal(&np, QiConvention::SimpleReciprocal).unwrap();
        let diam = q_internal(&np, QiConvention::DiameterCorrection).unwrap();
        assert!((diam - 5741.0).abs() < 5.0, "{diam}");
        assert!((simple - 5895.6).abs() < 0.1, "{simple}");
        let zero = NotchParams { phi0: 0.0, ..np };
        assert_eq!(
            q_internal(&zero, QiConvention::SimpleReciprocal).unwrap(),
            q_internal(&zero, QiConvention::DiameterCorrection).unwrap()
        );
        let bad = NotchParams { q_coupling_abs: 2000.0, ..np };
        assert!(matches!(q_internal(&bad, QiConvention::SimpleReciprocal), Err(Error::Domain(_))));
    }

    #[test]
    fn kappa_examples() {
        let k = kappa_from_q(8.1672e9, 2913.0);
        assert!((k - 2.80e6).abs() < 0.01e6);
        assert!((kappa_from_q(8.1672e9, 5758.0) - 1.42e6).abs() < 0.01e6);
        assert!(kappa_from_q(8.1672e9, 1e300) < 1e-280);
    }

    #[test]
    fn roundtrip_table_s1() {
        let (np, env) = table_s1();
        let freqs = linear_grid(np.f_res, 30e6, 2001);
        let trace = synthesize_s21(&np, &env, &freqs, 0.0, 0).unwrap();
        let fit = circle_fit(&trace).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(fit.notch.q_loaded, np.q_loaded) < 1e-6);
        assert!(rel(fit.notch.q_coupling_abs, np.q_coupling_abs) < 1e-6);
        assert!(rel(fit.notch.phi0, np.phi0) < 1e-6);
        assert!(rel(fit.notch.f_res, np.f_res) < 1e-6);
        assert!(rel(fit.env.amp, env.amp) < 1e-6);
        assert!(rel(fit.env.alpha, env.alpha) < 1e-6, "{}", fit.env.alpha);
        assert!(rel(fit.env.tau, env.tau) < 1e-6);
    }

    #[test]
    fn deembedded_data_lie_on_circle() {
        let (np, env) = table_s1();
        let freqs = linear_grid(np.f_res, 30e6, 501);
        let trace = synthesize_s21(&np, &env, &freqs, 0.0, 0).unwrap();
        let pts: Vec<Complex64> = trace
            .freqs
            .iter()
            .zip(&trace.values)
            .map(|(&f, v)| v / environment(&env, f))
            .collect();
        let c = taubin(&pts).unwrap();
        let mut r = vec![0.0; pts.len()];
        radial_residuals(&pts, &c, &mut r);
        let worst = r.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9 * c.r, "{worst}");
    }

    #[test]
    fn pure_environment_fails() {
        let (_, env) = table_s1();
        let freqs = linear_grid(8.1672e9, 30e6, 401);
        let values = freqs.iter().map(|&f| environment(&env, f)).collect();
        let trace = ComplexTrace::new(freqs, values).unwrap();
        assert!(matches!(circle_fit(&trace), Err(Error::FitFailure(_))));

        // with noise as well
        let np = NotchParams { q_loaded: 2913.0, q_coupling_abs: 1e9, phi0: 0.0, f_res: 8.1672e9 };
        let trace = synthesize_s21(&np, &env, &linear_grid(8.1672e9, 30e6, 401), 0.01, 3).unwrap();
        assert!(matches!(circle_fit(&trace), Err(Error::FitFailure(_))));
    }

    #[test]
    fn rejects_non_monotone() {
        let trace = ComplexTrace {
            freqs: vec![1.0, 3.0, 2.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            values: vec![Complex64::new(1.0, 0.0); 8],
        };
        assert!(matches!(circle_fit(&trace), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn analytic_jacobians() {
        let (np, env) = table_s1();
        let freqs = linear_grid(np.f_res, 30e6, 101);
        let trace = synthesize_s21(&np, &env, &freqs, 0.0, 0).unwrap();
        let f_ref = np.f_res;
        let offsets: Vec<f64> = freqs.iter().map(|f| f - f_ref).collect();
        let full = FullS21Problem { offsets: &offsets, values: &trace.values, f_ref };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for _ in 0..20 {
            let p = [
                rng.random_range(0.1..1.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..1e-7),
                rng.random_range(-2e6..2e6),
                rng.random_range(-0.5..0.5),
                rng.random_range(1000.0..5000.0),
                rng.random_range(5000.0..20000.0),
            ];
            assert!(jacobian_mismatch(&full, &p) < 1e-5);
            let theta: Vec<f64> = offsets.iter().map(|x| x * 1e-6).collect();
            let phase = PhaseProblem { offsets: &offsets, theta: &theta, f_ref };
            let worst = jacobian_mismatch(&phase, &[p[1], p[5], p[3]]);
            assert!(worst < 1e-5, "{worst}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn circle_fit_inverts_synthesis(
            ql in 500.0f64..50000.0,
            ratio in 1.2f64..10.0,
            phi0 in -0.5f64..0.5,
            tau in 0.0f64..100e-9,
            amp in 0.05f64..2.0,
            alpha in -3.0f64..3.0,
        ) {
            let np = NotchParams { q_loaded: ql, q_coupling_abs: ratio * ql, phi0, f_res: 6e9 };
            let env = EnvironmentParams { amp, alpha, tau };
            let span = 12.0 * np.f_res / ql;
            let trace = synthesize_s21(&np, &env, &linear_grid(np.f_res, span, 1001), 0.0, 0).unwrap();
            let fit = circle_fit(&trace).unwrap();
            let close = |a: f64, b: f64, floor: f64| (a - b).abs() <= 1e-6 * b.abs().max(floor);
            prop_assert!(close(fit.notch.q_loaded, ql, 1.0));
            prop_assert!(close(fit.notch.q_coupling_abs, ratio * ql, 1.0));
            prop_assert!(close(fit.notch.phi0, phi0, 1.0), "{} {}", fit.notch.phi0, phi0);
            prop_assert!(close(fit.notch.f_res, 6e9, 1.0));
            prop_assert!(close(fit.env.amp, amp, 1.0));
            prop_assert!(close(wrap_angle(fit.env.alpha - alpha), 0.0, 1.0));
            prop_assert!(close(fit.env.tau, tau, 1e-9));
        }

        #[test]
        fn diameter_correction_decomposes_linewidth(
            ql in 500.0f64..50000.0, ratio in 1.2f64..10.0, phi0 in -0.5f64..0.5,
        ) {
            let np = NotchParams { q_loaded: ql, q_coupling_abs: ratio * ql, phi0, f_res: 8e9 };
            if let Ok(qi) = q_internal(&np, QiConvention::DiameterCorrection) {
                let total = kappa_from_q(np.f_res, ql);
                let parts = kappa_from_q(np.f_res, q_coupling_real(&np)) + kappa_from_q(np.f_res, qi);
                prop_assert!(((total - parts) / total).abs() < 1e-12);
                let simple = q_internal(&np, QiConvention::SimpleReciprocal).unwrap();
                if phi0 != 0.0 {
                    prop_assert!(qi < simple);
                } else {
                    prop_assert_eq!(qi, simple);
                }
            }
        }
    }
}
