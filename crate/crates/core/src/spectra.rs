//! Homodyne power spectra of the cantilever: the damped-oscillator line
//! shape, synthetic spectra with a frequency-modulation calibration tone, the
//! line-shape fit and the calibrated extraction of the coupling.
//!
//! Spectra are stored in dBm per analyzer bin; fitting and calibration work
//! in linear power (mW per bin).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phys::{least_squares, FitReport, LeastSquaresOptions, Residuals};

/// Default offset of the calibration tone from the mechanical line (Hz).
pub const DEFAULT_CAL_OFFSET: f64 = 215.0;
/// Bins on either side of the calibration tone left out of line-shape fits.
pub const CAL_GUARD_BINS: usize = 2;
/// Minimum peak height above the floor for a usable spectrum (dB).
pub const MIN_PEAK_DB: f64 = 4.0;

pub fn dbm_to_mw(p: f64) -> f64 {
    10f64.powf(p / 10.0)
}

pub fn mw_to_dbm(p: f64) -> f64 {
    10.0 * p.log10()
}

/// Frequency-modulation calibration tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTone {
    pub f_mod: f64,
    /// Frequency deviation ("development") of the modulation (Hz).
    pub f_dev: f64,
}

impl CalibrationTone {
    pub fn new(f_mod: f64, f_dev: f64) -> Self {
        Self { f_mod, f_dev }
    }

    /// Tone placed `offset` above the mechanical frequency.
    pub fn detuned_from(omega_m: f64, offset: f64, f_dev: f64) -> Self {
        Self::new(omega_m + offset, f_dev)
    }

    pub fn mod_index(&self) -> f64 {
        self.f_dev / self.f_mod
    }
}

/// Power spectrum on a uniform grid, in dBm per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrace {
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
    /// Effective noise bandwidth of a bin (Hz).
    pub enbw: f64,
    pub n_averages: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationTone>,
}

impl SpectrumTrace {
    pub fn validate(&self) -> Result<()> {
        if self.freqs.len() != self.psd.len() || self.freqs.len() < 2 {
            return Err(Error::invalid("spectrum needs matching freqs/psd of length >= 2"));
        }
        if !(self.enbw > 0.0) {
            return Err(Error::invalid("enbw must be positive"));
        }
        if self.psd.iter().chain(&self.freqs).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite spectrum sample"));
        }
        let step = self.step();
        if !(step > 0.0) {
            return Err(Error::invalid("frequencies must be strictly increasing"));
        }
        let tol = 1e-6 * step;
        if self.freqs.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > tol) {
            return Err(Error::invalid("frequency grid must be uniform"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.freqs[self.freqs.len() - 1] - self.freqs[0]) / (self.freqs.len() - 1) as f64
    }

    pub fn linear(&self) -> Vec<f64> {
        self.psd.iter().map(|&p| dbm_to_mw(p)).collect()
    }

    /// Index of the bin closest to `f`, if `f` lies on the grid.
    pub fn bin_of(&self, f: f64) -> Option<usize> {
        let step = self.step();
        let idx = ((f - self.freqs[0]) / step).round();
        (idx >= 0.0 && (idx as usize) < self.freqs.len()).then_some(idx as usize)
    }

    pub fn same_grid(&self, other: &SpectrumTrace) -> bool {
        self.freqs == other.freqs && self.enbw == other.enbw
    }
}

/// Parameters of a mechanical line in a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechSpectrumFit {
    pub omega_m: f64,
    pub gamma_m: f64,
    /// Line-shape scale in instrument units (mW Hz^3 per bin).
    pub amplitude: f64,
    /// Flat background (dBm per bin).
    pub noise_floor: f64,
    #[serde(default)]
    pub omega_m_err: f64,
    #[serde(default)]
    pub gamma_m_err: f64,
    #[serde(default)]
    pub amplitude_err: f64,
    /// Calibrated `g0 sqrt(n)` (Hz) once a calibration tone has been evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0_sqrt_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0_sqrt_n_err: Option<f64>,
}

impl MechSpectrumFit {
    /// Line whose strength follows from a transduction factor and the
    /// coupling observable: `amplitude = 4 T (g0 sqrt n)^2 omega_m^2`.
    ///
    /// With this normalization the calibration tone of a given modulation
    /// depends on `T` alone.
    pub fn for_coupling(omega_m: f64, gamma_m: f64, transduction: f64, noise_floor_dbm: f64, g0_sqrt_n: f64) -> Self {
        Self {
            omega_m,
            gamma_m,
            amplitude: 4.0 * transduction * g0_sqrt_n * g0_sqrt_n * omega_m * omega_m,
            noise_floor: noise_floor_dbm,
            omega_m_err: 0.0,
            gamma_m_err: 0.0,
            amplitude_err: 0.0,
            g0_sqrt_n: Some(g0_sqrt_n),
            g0_sqrt_n_err: None,
        }
    }

    /// Inverse of `for_coupling`.
    pub fn transduction(&self) -> Option<f64> {
        self.g0_sqrt_n
            .filter(|g| *g > 0.0)
            .map(|g| self.amplitude / (4.0 * g * g * self.omega_m * self.omega_m))
    }

    /// Peak of the mechanical line alone (mW per bin).
    pub fn peak_power(&self) -> f64 {
        psd_model(self.omega_m, self.gamma_m, self.amplitude, self.omega_m)
    }

    /// Height of the fitted maximum above the floor (dB).
    pub fn peak_above_floor_db(&self) -> f64 {
        let floor = dbm_to_mw(self.noise_floor);
        mw_to_dbm((floor + self.peak_power()) / floor)
    }

    /// Fitted maximum, line plus floor (dBm).
    pub fn fit_max_dbm(&self) -> f64 {
        mw_to_dbm(dbm_to_mw(self.noise_floor) + self.peak_power())
    }

    /// Line plus floor at `f` (mW per bin).
    pub fn model_mw(&self, f: f64) -> f64 {
        dbm_to_mw(self.noise_floor) + psd_model(self.omega_m, self.gamma_m, self.amplitude, f)
    }
}

/// Damped harmonic oscillator line `scale * 2 gamma / ((f^2 - w^2)^2 + gamma^2 f^2)`.
pub fn psd_model(omega_m: f64, gamma_m: f64, scale: f64, freq: f64) -> f64 {
    line_from_offset(freq - omega_m, omega_m, gamma_m, scale, freq)
}

/// Line shape with the detuning `freq - omega_m` supplied separately, which
/// keeps fits well conditioned when both frequencies are large.
fn line_from_offset(offset: f64, omega_m: f64, gamma_m: f64, scale: f64, freq: f64) -> f64 {
    let d = offset * (freq + omega_m);
    scale * 2.0 * gamma_m / (d * d + gamma_m * gamma_m * freq * freq)
}

/// Power the calibration tone deposits in its bin (mW):
/// `(phi_mod^2 f_mod^2 / 2) T / ENBW`.
pub fn calibration_power(cal: &CalibrationTone, transduction: f64, enbw: f64) -> f64 {
    let m = cal.mod_index();
    0.5 * m * m * cal.f_mod * cal.f_mod * transduction / enbw
}

/// Grid and instrument settings for synthetic spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSynthesis {
    /// Centre of the span; defaults to the mechanical frequency.
    pub center: Option<f64>,
    pub span: f64,
    pub n_points: usize,
    /// Defaults to the bin spacing.
    pub enbw: Option<f64>,
    pub n_averages: u32,
    /// When false every bin holds its expected power exactly.
    pub noisy: bool,
}

impl SpectrumSynthesis {
    /// 800 Hz span, 8001 bins, 0.1 Hz bandwidth.
    pub fn analyzer_default() -> Self {
        Self {
            center: None,
            span: 800.0,
            n_points: 8001,
            enbw: None,
            n_averages: 1,
            noisy: true,
        }
    }
}

/// Synthetic analyzer trace for a mechanical line and calibration tone.
///
/// Expected bin power is floor plus line plus, in the bin nearest `f_mod`, the
/// calibration tone. Floor and line fluctuate multiplicatively with
/// Gamma(n_averages, 1/n_averages) statistics; the coherent tone does not.
pub fn synthesize_spectrum(
    mech: &MechSpectrumFit,
    cal: &CalibrationTone,
    synth: &SpectrumSynthesis,
    seed: u64,
) -> Result<SpectrumTrace> {
    if synth.n_points < 64 {
        return Err(Error::invalid("synthetic spectra need at least 64 points"));
    }
    if !(synth.span > 0.0) || synth.n_averages == 0 {
        return Err(Error::invalid("span and n_averages must be positive"));
    }
    let center = synth.center.unwrap_or(mech.omega_m);
    let lo = center - 0.5 * synth.span;
    let hi = center + 0.5 * synth.span;
    if !(mech.omega_m >= lo && mech.omega_m <= hi) {
        return Err(Error::invalid("span excludes the mechanical frequency"));
    }
    if !(cal.f_mod >= lo && cal.f_mod <= hi) {
        return Err(Error::invalid("calibration tone outside the span"));
    }
    let step = synth.span / (synth.n_points - 1) as f64;
    let freqs: Vec<f64> = (0..synth.n_points).map(|i| lo + step * i as f64).collect();
    let enbw = synth.enbw.unwrap_or(step);
    let transduction = mech
        .transduction()
        .ok_or_else(|| Error::invalid("mechanical line needs a positive g0_sqrt_n to place the calibration tone"))?;

    let n = synth.n_averages as f64;
    let gamma = Gamma::new(n, 1.0 / n).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut power: Vec<f64> = freqs
        .iter()
        .map(|&f| {
            let expected = mech.model_mw(f);
            if synth.noisy {
                expected * gamma.sample(&mut rng)
            } else {
                expected
            }
        })
        .collect();
    let cal_bin = ((cal.f_mod - lo) / step).round() as usize;
    power[cal_bin] += calibration_power(cal, transduction, enbw);

    Ok(SpectrumTrace {
        freqs,
        psd: power.into_iter().map(mw_to_dbm).collect(),
        enbw,
        n_averages: synth.n_averages,
        calibration: Some(*cal),
    })
}

/// Linear-power line-shape model with fixed per-bin weights.
/// Parameters: omega_m offset from `f_ref`, gamma_m, amplitude, floor (mW).
struct LineProblem<'a> {
    freqs: &'a [f64],
    data: &'a [f64],
    weights: Vec<f64>,
    f_ref: f64,
}

impl Residuals for LineProblem<'_> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.freqs.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let w0 = self.f_ref + p[0];
        for i in 0..self.freqs.len() {
            let f = self.freqs[i];
            let m = p[3] + line_from_offset((f - self.f_ref) - p[0], w0, p[1], p[2], f);
            out[i] = (m - self.data[i]) * self.weights[i];
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let w0 = self.f_ref + p[0];
        let (g, a) = (p[1], p[2]);
        for (i, &f) in self.freqs.iter().enumerate() {
            let d = ((f - self.f_ref) - p[0]) * (f + w0);
            let den = d * d + g * g * f * f;
            let w = self.weights[i];
            jac[(i, 0)] = w * a * 2.0 * g * 4.0 * w0 * d / (den * den);
            jac[(i, 1)] = w * a * (2.0 / den - 4.0 * g * g * f * f / (den * den));
            jac[(i, 2)] = w * 2.0 * g / den;
            jac[(i, 3)] = w;
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        ["omega_m", "gamma_m", "amplitude", "noise_floor"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Bins used for the line-shape fit (everything except the calibration tone).
fn fit_mask(trace: &SpectrumTrace) -> Vec<bool> {
    let mut keep = vec![true; trace.freqs.len()];
    if let Some(cal) = trace.calibration {
        if let Some(b) = trace.bin_of(cal.f_mod) {
            let lo = b.saturating_sub(CAL_GUARD_BINS);
            let hi = (b + CAL_GUARD_BINS).min(keep.len() - 1);
            keep[lo..=hi].iter_mut().for_each(|k| *k = false);
        }
    }
    keep
}

/// Highest bin outside the calibration guard (dBm).
pub fn data_max_dbm(trace: &SpectrumTrace) -> f64 {
    let mask = fit_mask(trace);
    trace
        .psd
        .iter()
        .zip(&mask)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fit the damped-oscillator line plus flat floor in linear power.
///
/// Weights are refined over a few passes so that each bin counts with the
/// inverse of its expected power, the natural scale of averaged-periodogram
/// noise. When the trace carries a calibration tone the calibrated
/// `g0 sqrt(n)` is filled in as well.
pub fn fit_spectrum(trace: &SpectrumTrace, init_hint: Option<&MechSpectrumFit>) -> Result<(MechSpectrumFit, FitReport)> {
    trace.validate()?;
    let mask = fit_mask(trace);
    let lin = trace.linear();
    let freqs: Vec<f64> = trace.freqs.iter().zip(&mask).filter(|(_, k)| **k).map(|(f, _)| *f).collect();
    let data: Vec<f64> = lin.iter().zip(&mask).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    let step = trace.step();
    if freqs.len() < 8 {
        return Err(Error::invalid("too few bins to fit"));
    }

    let floor0 = median(&mut data.clone());
    let (i_max, &d_max) = data
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    if mw_to_dbm(d_max / floor0) < MIN_PEAK_DB {
        return Err(Error::fit(format!("peak < {MIN_PEAK_DB} dB above floor")));
    }
    let peak0 = d_max - floor0;
    let half = floor0 + 0.5 * peak0;
    let mut lo = i_max;
    while lo > 0 && data[lo - 1] > half {
        lo -= 1;
    }
    let mut hi = i_max;
    while hi + 1 < data.len() && data[hi + 1] > half {
        hi += 1;
    }
    let mut init = match init_hint {
        Some(h) => [h.omega_m, h.gamma_m, h.amplitude, dbm_to_mw(h.noise_floor)],
        None => {
            let w0 = freqs[i_max];
            let g0 = ((hi - lo + 1) as f64 * step).max(0.5 * step);
            [w0, g0, peak0 * g0 * w0 * w0 / 2.0, floor0]
        }
    };
    let f_ref = init[0];
    init[0] = 0.0;

    let span = freqs[freqs.len() - 1] - freqs[0];
    let opts = LeastSquaresOptions::default().with_bounds(vec![
        (freqs[0] - f_ref, freqs[freqs.len() - 1] - f_ref),
        (1e-3 * step, span),
        (0.0, f64::INFINITY),
        (0.0, f64::INFINITY),
    ]);
    let mut problem = LineProblem {
        freqs: &freqs,
        data: &data,
        weights: vec![0.0; freqs.len()],
        f_ref,
    };
    let mut params = init.to_vec();
    let mut report = None;
    for _ in 0..4 {
        let w0 = f_ref + params[0];
        problem.weights = freqs
            .iter()
            .map(|&f| 1.0 / (params[3] + psd_model(w0, params[1], params[2], f)).max(1e-300))
            .collect();
        let rep = least_squares(&problem, &params, &opts)?;
        params = rep.params.clone();
        report = Some(rep);
    }
    let mut report = report.expect("at least one pass");
    report.params[0] += f_ref;
    report.stderr[3] = report.stderr[3] / report.params[3] * 10.0 / std::f64::consts::LN_10;
    report.params[3] = mw_to_dbm(report.params[3]);

    let mut fit = MechSpectrumFit {
        omega_m: report.params[0],
        gamma_m: report.params[1],
        amplitude: report.params[2],
        noise_floor: report.params[3],
        omega_m_err: report.stderr[0],
        gamma_m_err: report.stderr[1],
        amplitude_err: report.stderr[2],
        g0_sqrt_n: None,
        g0_sqrt_n_err: None,
    };
    if fit.amplitude <= 0.0 || fit.peak_above_floor_db() < MIN_PEAK_DB {
        return Err(Error::fit(format!("peak < {MIN_PEAK_DB} dB above floor")));
    }
    if fit.gamma_m < 0.25 * step {
        return Err(Error::fit("fitted linewidth below a quarter bin: no resolved mechanical line"));
    }
    if !(fit.amplitude_err.is_finite() && fit.amplitude > 3.0 * fit.amplitude_err) {
        return Err(Error::fit("mechanical line amplitude not significant"));
    }
    if let Some(cal) = trace.calibration {
        if let Ok(est) = extract_g0(trace, &fit, &cal, 1.0) {
            fit.g0_sqrt_n = Some(est.value);
            fit.g0_sqrt_n_err = Some(est.stderr);
        }
    }
    Ok((fit, report))
}

/// Coupling estimate and its propagated standard error (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G0Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Calibration-tone power (mW) in its bin, after removing the fitted floor
/// and line underneath it.
pub fn calibration_bin_power(trace: &SpectrumTrace, fit: &MechSpectrumFit, cal: &CalibrationTone) -> Result<f64> {
    let bin = trace
        .bin_of(cal.f_mod)
        .ok_or_else(|| Error::Calibration("calibration tone outside the trace".into()))?;
    Ok(dbm_to_mw(trace.psd[bin]) - fit.model_mw(trace.freqs[bin]))
}

/// Coupling from the ratio of mechanical to calibration power:
///
/// `g0^2 = 1/(2n) * (phi_mod^2 f_mod^2 / 2) * (S(omega_m) gamma_m / 4) / (S(f_mod) ENBW)`
///
/// with `S(omega_m)` the fitted line peak and `S(f_mod)` the tone power in its
/// bin, both linear.
pub fn extract_g0(trace: &SpectrumTrace, fit: &MechSpectrumFit, cal: &CalibrationTone, n_phonons: f64) -> Result<G0Estimate> {
    if !(n_phonons > 0.0) {
        return Err(Error::invalid("phonon number must be positive"));
    }
    let s_cal = calibration_bin_power(trace, fit, cal)?;
    let bin = trace.bin_of(cal.f_mod).expect("checked above");
    let background = fit.model_mw(trace.freqs[bin]);
    let bin_sigma = background / (trace.n_averages.max(1) as f64).sqrt();
    if !(s_cal > 3.0 * bin_sigma) || s_cal <= 0.0 {
        return Err(Error::Calibration(format!(
            "calibration peak missing: {:.2} dBm excess in its bin",
            mw_to_dbm(s_cal.max(1e-300))
        )));
    }
    let m = cal.mod_index();
    let s_mech = fit.peak_power();
    let g2 = 1.0 / (2.0 * n_phonons) * (m * m * cal.f_mod * cal.f_mod / 2.0) * (s_mech * fit.gamma_m / 4.0)
        / (s_cal * trace.enbw);
    let value = g2.max(0.0).sqrt();
    // S(omega_m) gamma_m = 2 A / omega_m^2; the omega_m term is negligible
    let rel_area = if fit.amplitude > 0.0 { fit.amplitude_err / fit.amplitude } else { 0.0 };
    let rel_cal = bin_sigma / s_cal;
    let stderr = 0.5 * value * (rel_area * rel_area + rel_cal * rel_cal).sqrt();
    Ok(G0Estimate { value, stderr })
}

/// The photon-independent observable `g0 sqrt(n)`.
pub fn g0_sqrt_n(trace: &SpectrumTrace, fit: &MechSpectrumFit, cal: &CalibrationTone) -> Result<G0Estimate> {
    extract_g0(trace, fit, cal, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optomech::thermal_occupation;
    use crate::phys::jacobian_mismatch;
    use rand::Rng;

    const OMEGA_M: f64 = 274_383.13;

    fn source(g0: f64, n: f64, gamma: f64) -> MechSpectrumFit {
        // transduction chosen for a line ~30 dB above a -140 dBm floor
        let peak = dbm_to_mw(-110.0);
        let amplitude = peak * gamma * OMEGA_M * OMEGA_M / 2.0;
        let g = g0 * n.sqrt();
        let t = amplitude / (4.0 * g * g * OMEGA_M * OMEGA_M);
        MechSpectrumFit::for_coupling(OMEGA_M, gamma, t, -140.0, g)
    }

    fn quiet() -> SpectrumSynthesis {
        SpectrumSynthesis {
            noisy: false,
            ..SpectrumSynthesis::analyzer_default()
        }
    }

    #[test]
    fn line_shape_peak_width_area() {
        let (w, g, a) = (OMEGA_M, 0.3, 2.0);
        assert!((psd_model(w, g, a, w) - a * 2.0 / (g * w * w)).abs() < 1e-24);
        // half maximum at +- gamma/2
        let half = psd_model(w, g, a, w) / 2.0;
        let left = psd_model(w, g, a, w - g / 2.0);
        assert!((left / half - 1.0).abs() < 1e-5);
        // trapezoid quadrature oracle over +- 2000 linewidths
        let n = 4_000_001;
        let lo = w - 600.0;
        let h = 1200.0 / (n - 1) as f64;
        let mut sum = 0.0;
        for i in 0..n {
            let f = lo + h * i as f64;
            let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            sum += wgt * psd_model(w, g, a, f);
        }
        let integral = sum * h;
        let expected = a * std::f64::consts::PI / (w * w);
        assert!((integral / expected - 1.0).abs() < 1e-3, "{}", integral / expected);
    }

    #[test]
    fn synthesis_determinism_and_noiseless() {
        let src = source(48.0, 7592.0, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let exact = synthesize_spectrum(&src, &cal, &quiet(), 7).unwrap();
        let bin = exact.bin_of(OMEGA_M + 10.0).unwrap();
        assert!((dbm_to_mw(exact.psd[bin]) / src.model_mw(exact.freqs[bin]) - 1.0).abs() < 1e-12);
        let synth = SpectrumSynthesis::analyzer_default();
        let a = synthesize_spectrum(&src, &cal, &synth, 7).unwrap();
        let b = synthesize_spectrum(&src, &cal, &synth, 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize_spectrum(&src, &cal, &synth, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn averaging_statistics() {
        let src = MechSpectrumFit {
            amplitude: 0.0,
            ..source(48.0, 7592.0, 0.3)
        };
        let src = MechSpectrumFit { g0_sqrt_n: Some(1.0), ..src };
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let synth = SpectrumSynthesis {
            n_points: 10_001,
            span: 1000.0,
            n_averages: 4,
            ..SpectrumSynthesis::analyzer_default()
        };
        let mut src = src;
        src.amplitude = 0.0;
        let t = synthesize_spectrum(&MechSpectrumFit { amplitude: 1e-300, ..src }, &cal, &synth, 1).unwrap();
        let floor = dbm_to_mw(-140.0);
        let cal_bin = t.bin_of(cal.f_mod).unwrap();
        let rel: Vec<f64> = t
            .linear()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != cal_bin)
            .map(|(_, p)| p / floor)
            .collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let std = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rel.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((std - 0.5).abs() < 0.02, "{std}");
    }

    #[test]
    fn synthesis_rejects_bad_span() {
        let src = source(48.0, 7592.0, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let synth = SpectrumSynthesis { center: Some(OMEGA_M + 1000.0), ..quiet() };
        assert!(matches!(synthesize_spectrum(&src, &cal, &synth, 0), Err(Error::InvalidInput(_))));
        let synth = SpectrumSynthesis { n_points: 10, ..quiet() };
        assert!(synthesize_spectrum(&src, &cal, &synth, 0).is_err());
    }

    #[test]
    fn separability_of_tone_and_line() {
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let a_src = source(48.0, 7592.0, 0.3);
        let t = a_src.transduction().unwrap();
        let b_src = MechSpectrumFit::for_coupling(OMEGA_M, 0.6, t, -140.0, 2.0 * a_src.g0_sqrt_n.unwrap());
        let a = synthesize_spectrum(&a_src, &cal, &quiet(), 0).unwrap();
        let b = synthesize_spectrum(&b_src, &cal, &quiet(), 0).unwrap();
        let bin = a.bin_of(cal.f_mod).unwrap();
        let ca = calibration_bin_power(&a, &a_src, &cal).unwrap();
        let cb = calibration_bin_power(&b, &b_src, &cal).unwrap();
        assert!((ca / cb - 1.0).abs() < 1e-9);
        let cal2 = CalibrationTone { f_dev: 4000.0, ..cal };
        let c = synthesize_spectrum(&a_src, &cal2, &quiet(), 0).unwrap();
        for i in 0..a.psd.len() {
            if i != bin {
                assert_eq!(a.psd[i], c.psd[i]);
            }
        }
        let cc = calibration_bin_power(&c, &a_src, &cal2).unwrap();
        assert!((cc / ca - 4.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_fit_recovers_line() {
        let src = source(48.0, 7592.0, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let trace = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
        let (fit, rep) = fit_spectrum(&trace, None).unwrap();
        assert!(rep.converged);
        assert!((fit.omega_m / OMEGA_M - 1.0).abs() < 1e-6);
        assert!((fit.gamma_m / 0.3 - 1.0).abs() < 1e-6);
        assert!((fit.amplitude / src.amplitude - 1.0).abs() < 1e-6);
        assert!((fit.noise_floor + 140.0).abs() < 1e-6);
    }

    #[test]
    fn fit_is_shift_equivariant() {
        let cal_off = DEFAULT_CAL_OFFSET;
        let mut fits = Vec::new();
        for shift in [0.0, 1234.5] {
            let mut src = source(48.0, 7592.0, 0.3);
            src.omega_m += shift;
            let cal = CalibrationTone::detuned_from(src.omega_m, cal_off, 2000.0);
            let trace = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
            fits.push(fit_spectrum(&trace, None).unwrap().0);
        }
        assert!((fits[0].gamma_m / fits[1].gamma_m - 1.0).abs() < 1e-9);
        assert!((fits[0].amplitude / fits[1].amplitude - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_coverage() {
        let src = source(48.0, 7592.0, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let synth = SpectrumSynthesis { n_averages: 4, ..SpectrumSynthesis::analyzer_default() };
        let mut covered = 0;
        for seed in 0..100 {
            let trace = synthesize_spectrum(&src, &cal, &synth, seed).unwrap();
            let (fit, _) = fit_spectrum(&trace, None).unwrap();
            if (fit.omega_m - OMEGA_M).abs() <= 3.0 * fit.omega_m_err {
                covered += 1;
            }
        }
        assert!(covered >= 95, "{covered}");
    }

    #[test]
    fn pure_noise_fails() {
        let src = MechSpectrumFit { amplitude: 0.0, g0_sqrt_n: Some(1.0), ..source(48.0, 7592.0, 0.3) };
        let src = MechSpectrumFit { amplitude: 1e-300, ..src };
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        for seed in 0..20 {
            let synth = SpectrumSynthesis { n_averages: 4, ..SpectrumSynthesis::analyzer_default() };
            let trace = synthesize_spectrum(&src, &cal, &synth, seed).unwrap();
            let err = fit_spectrum(&trace, None).unwrap_err();
            assert!(matches!(err, Error::FitFailure(_)), "{err:?}");
        }
        let flat = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
        assert!(fit_spectrum(&flat, None).is_err());
    }

    #[test]
    fn calibration_roundtrip_operating_point() {
        let n = thermal_occupation(0.1, OMEGA_M);
        let src = source(48.0, n, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let trace = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
        let (fit, _) = fit_spectrum(&trace, None).unwrap();
        let g0 = extract_g0(&trace, &fit, &cal, n).unwrap();
        assert!((g0.value / 48.0 - 1.0).abs() < 0.02, "{}", g0.value);
        let g4 = extract_g0(&trace, &fit, &cal, 4.0 * n).unwrap();
        assert!((g4.value / g0.value - 0.5).abs() < 1e-12);
        let gsn = g0_sqrt_n(&trace, &fit, &cal).unwrap();
        assert!((gsn.value / (48.0 * n.sqrt()) - 1.0).abs() < 1e-6);
        assert!((gsn.value - 4.18e3).abs() < 10.0);

        // doubling the deviation leaves the estimate unchanged
        let cal2 = CalibrationTone { f_dev: 4000.0, ..cal };
        let trace2 = synthesize_spectrum(&src, &cal2, &quiet(), 0).unwrap();
        let (fit2, _) = fit_spectrum(&trace2, None).unwrap();
        let g2 = extract_g0(&trace2, &fit2, &cal2, n).unwrap();
        assert!((g2.value / g0.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn g0_sqrt_n_independent_of_probe_power() {
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let base = source(48.0, 7592.0, 0.3);
        let t = base.transduction().unwrap();
        let mut values = Vec::new();
        for gain in [1.0, 4.0] {
            let src = MechSpectrumFit::for_coupling(OMEGA_M, 0.3, gain * t, -140.0, base.g0_sqrt_n.unwrap());
            let trace = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
            let (fit, _) = fit_spectrum(&trace, None).unwrap();
            values.push(g0_sqrt_n(&trace, &fit, &cal).unwrap().value);
        }
        assert!((values[0] / values[1] - 1.0).abs() < 1e-6);
        let zero = MechSpectrumFit { amplitude: 0.0, ..base };
        let trace = synthesize_spectrum(&base, &cal, &quiet(), 0).unwrap();
        assert_eq!(g0_sqrt_n(&trace, &zero, &cal).unwrap().value, 0.0);
    }

    #[test]
    fn missing_calibration_peak() {
        let src = source(48.0, 7592.0, 0.3);
        let cal = CalibrationTone::detuned_from(OMEGA_M, DEFAULT_CAL_OFFSET, 2000.0);
        let trace = synthesize_spectrum(&src, &cal, &quiet(), 0).unwrap();
        let (fit, _) = fit_spectrum(&trace, None).unwrap();
        let elsewhere = CalibrationTone::new(OMEGA_M - 150.0, 2000.0);
        assert!(matches!(extract_g0(&trace, &fit, &elsewhere, 100.0), Err(Error::Calibration(_))));
        let outside = CalibrationTone::new(OMEGA_M + 5000.0, 2000.0);
        assert!(matches!(extract_g0(&trace, &fit, &outside, 100.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn line_jacobian() {
        let freqs: Vec<f64> = (0..200).map(|i| OMEGA_M - 10.0 + 0.1 * i as f64).collect();
        let data = vec![1.0; 200];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let problem = LineProblem {
                freqs: &freqs,
                data: &data,
                weights: vec![1.0; 200],
                f_ref: OMEGA_M,
            };
            let p = [
                rng.random_range(-3.0..3.0),
                rng.random_range(0.1..2.0),
                rng.random_range(1e10..1e11),
                rng.random_range(0.1..1.0),
            ];
            let mm = jacobian_mismatch(&problem, &p);
            assert!(mm < 1e-5, "{mm} {p:?}");
        }
    }
}
