//! Measurement-analysis protocol: group averaging, trace rejection,
//! temperature-ramp and coupling-sweep fits, cavity tracking from VNA traces,
//! detuning binning and the backaction model fit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optomech::{backaction_with_occupation, thermal_occupation, DriveConfig};
use crate::phys::{least_squares, FitReport, LeastSquaresOptions, Residuals};
use crate::resonator::ComplexTrace;
use crate::spectra::{
    data_max_dbm, dbm_to_mw, extract_g0, fit_spectrum, mw_to_dbm, MechSpectrumFit, SpectrumTrace,
};
use crate::squid::{coupling_g0, CavityParams, FluxPoint, MechanicalParams};

/// Conditions under which a set of traces was recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    #[serde(default)]
    pub label: String,
    /// Fridge temperature (K).
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_power_dbm: Option<f64>,
    /// Flux bias in flux quanta.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_point: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pump_freq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRun {
    pub traces: Vec<SpectrumTrace>,
    /// One VNA sweep per spectrum, for runs that track the cavity.
    pub vna_traces: Option<Vec<ComplexTrace>>,
    pub meta: RunMeta,
}

impl MeasurementRun {
    pub fn validate(&self) -> Result<()> {
        if self.traces.is_empty() {
            return Err(Error::invalid("run has no traces"));
        }
        if let Some(v) = &self.vna_traces {
            if v.len() != self.traces.len() {
                return Err(Error::invalid(format!(
                    "{} VNA traces for {} spectra",
                    v.len(),
                    self.traces.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionPolicy {
    pub max_fit_gap_db: f64,
    pub min_peak_above_floor_db: f64,
    pub max_group_failure_frac: f64,
    pub min_groups: usize,
    pub min_cal_peak_dbm: f64,
    pub group_size: usize,
}

impl RejectionPolicy {
    pub fn coupling_sweep() -> Self {
        Self {
            max_fit_gap_db: 4.0,
            min_peak_above_floor_db: 4.0,
            max_group_failure_frac: 0.25,
            min_groups: 7,
            min_cal_peak_dbm: -130.0,
            group_size: 4,
        }
    }

    pub fn backaction() -> Self {
        Self {
            min_groups: 1,
            ..Self::coupling_sweep()
        }
    }
}

impl Default for RejectionPolicy {
    fn default() -> Self {
        Self::coupling_sweep()
    }
}

/// Bin-wise mean in linear power of traces sharing one grid.
pub fn average_traces(traces: &[&SpectrumTrace]) -> Result<SpectrumTrace> {
    let first = *traces.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let mut acc = vec![0.0; first.freqs.len()];
    let mut n_avg = 0u32;
    for t in traces {
        if !t.same_grid(first) {
            return Err(Error::invalid("traces do not share a frequency grid"));
        }
        for (a, p) in acc.iter_mut().zip(&t.psd) {
            *a += dbm_to_mw(*p);
        }
        n_avg += t.n_averages;
    }
    let k = traces.len() as f64;
    Ok(SpectrumTrace {
        freqs: first.freqs.clone(),
        psd: acc.into_iter().map(|a| mw_to_dbm(a / k)).collect(),
        enbw: first.enbw,
        n_averages: n_avg,
        calibration: first.calibration,
    })
}

/// Average consecutive, non-overlapping groups; a trailing partial group is
/// dropped.
pub fn average_groups(run: &MeasurementRun, group_size: usize) -> Result<Vec<SpectrumTrace>> {
    if group_size == 0 {
        return Err(Error::invalid("group_size must be at least 1"));
    }
    let first = run.traces.first().ok_or_else(|| Error::invalid("run has no traces"))?;
    if run.traces.iter().any(|t| !t.same_grid(first)) {
        return Err(Error::invalid("traces do not share a frequency grid"));
    }
    run.traces
        .chunks_exact(group_size)
        .map(|g| average_traces(&g.iter().collect::<Vec<_>>()))
        .collect()
}

/// A trace together with its line-shape fit or the reason it could not be fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFit {
    pub trace: SpectrumTrace,
    pub fit: std::result::Result<(MechSpectrumFit, FitReport), Error>,
}

pub fn fit_traces(traces: Vec<SpectrumTrace>) -> Vec<TraceFit> {
    traces
        .into_iter()
        .map(|trace| {
            let fit = fit_spectrum(&trace, None);
            TraceFit { trace, fit }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub index: usize,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionLog {
    pub verdicts: Vec<Verdict>,
    pub n_failed: usize,
    pub set_discarded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_reason: Option<String>,
}

/// Per-trace criteria, without the set-level rules.
pub fn trace_verdict(item: &TraceFit, policy: &RejectionPolicy) -> Vec<String> {
    let (fit, _) = match &item.fit {
        Ok(f) => f,
        Err(Error::FitFailure(msg)) => return vec![msg.clone()],
        Err(e) => return vec![e.to_string()],
    };
    let mut reasons = Vec::new();
    let gap = (data_max_dbm(&item.trace) - fit.fit_max_dbm()).abs();
    if gap > policy.max_fit_gap_db {
        reasons.push(format!(
            "data maximum {gap:.2} dB from fit maximum (> {} dB)",
            policy.max_fit_gap_db
        ));
    }
    if fit.peak_above_floor_db() < policy.min_peak_above_floor_db {
        reasons.push(format!("peak < {} dB above floor", policy.min_peak_above_floor_db));
    }
    match item.trace.calibration.and_then(|c| item.trace.bin_of(c.f_mod)) {
        Some(bin) if item.trace.psd[bin] >= policy.min_cal_peak_dbm => {}
        Some(bin) => reasons.push(format!(
            "calibration peak {:.1} dBm < {} dBm",
            item.trace.psd[bin], policy.min_cal_peak_dbm
        )),
        None => reasons.push("no calibration tone in trace".into()),
    }
    reasons
}

/// Apply the per-trace criteria, then discard the whole set when more than
/// `max_group_failure_frac` failed, then require `min_groups` survivors.
/// Returns indices of accepted items.
pub fn apply_rejection(fits: &[TraceFit], policy: &RejectionPolicy) -> (Vec<usize>, RejectionLog) {
    let mut verdicts: Vec<Verdict> = fits
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let reasons = trace_verdict(item, policy);
            Verdict { index, accepted: reasons.is_empty(), reasons }
        })
        .collect();
    let n_failed = verdicts.iter().filter(|v| !v.accepted).count();
    let mut set_reason = None;
    if !fits.is_empty() && n_failed as f64 / fits.len() as f64 > policy.max_group_failure_frac {
        set_reason = Some(format!(
            "{n_failed} of {} traces failed (> {:.0}%)",
            fits.len(),
            100.0 * policy.max_group_failure_frac
        ));
    } else {
        let survivors = fits.len() - n_failed;
        if survivors < policy.min_groups {
            set_reason = Some(format!("{survivors} surviving groups < {}", policy.min_groups));
        }
    }
    if set_reason.is_some() {
        for v in verdicts.iter_mut() {
            v.accepted = false;
        }
    }
    let accepted = verdicts.iter().filter(|v| v.accepted).map(|v| v.index).collect();
    let log = RejectionLog {
        verdicts,
        n_failed,
        set_discarded: set_reason.is_some(),
        set_reason,
    };
    (accepted, log)
}

struct RampProblem<'a> {
    scale: Vec<f64>,
    y: &'a [f64],
}

impl Residuals for RampProblem<'_> {
    fn n_params(&self) -> usize {
        1
    }
    fn n_residuals(&self) -> usize {
        self.y.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.y.len() {
            out[i] = p[0] * self.scale[i] - self.y[i];
        }
    }
    fn jacobian(&self, _p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        for (i, s) in self.scale.iter().enumerate() {
            jac[(i, 0)] = *s;
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        vec!["g0".into()]
    }
}

/// Fit `g0 * sqrt(n_th(T))` to `(temperature, g0_sqrt_n)` points.
pub fn temperature_ramp_fit(points: &[(f64, f64)], omega_m: f64) -> Result<(f64, FitReport)> {
    if points.len() < 3 {
        return Err(Error::invalid("temperature ramp needs at least 3 points"));
    }
    if let Some((t, _)) = points.iter().find(|(t, _)| !(0.05..=1.0).contains(t)) {
        return Err(Error::invalid(format!("temperature {t} K outside [0.05, 1] K")));
    }
    let t0 = points[0].0;
    if points.iter().all(|(t, _)| *t == t0) {
        return Err(Error::fit("all ramp points at one temperature"));
    }
    let scale: Vec<f64> = points.iter().map(|(t, _)| thermal_occupation(*t, omega_m).sqrt()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let init = scale.iter().zip(&y).map(|(s, v)| s * v).sum::<f64>() / scale.iter().map(|s| s * s).sum::<f64>();
    let problem = RampProblem { scale, y: &y };
    let report = least_squares(&problem, &[init], &LeastSquaresOptions::default())?;
    Ok((report.params[0], report))
}

/// Coupling measured in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingPoint {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_point: Option<f64>,
    pub g0_mean: f64,
    pub g0_std: f64,
    pub gamma_m_mean: f64,
    pub n_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0_predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: String,
    pub included: bool,
    pub rejection: RejectionLog,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per run: average in groups, fit, reject, extract g0 from every surviving
/// group with the thermal occupation at `temp`, and report mean and sample
/// standard deviation. Runs failing the rejection protocol are logged and left
/// out.
pub fn coupling_sweep_analysis(
    runs: &[MeasurementRun],
    cav: &CavityParams,
    mech: &MechanicalParams,
    temp: f64,
    policy: &RejectionPolicy,
) -> Result<(Vec<CouplingPoint>, Vec<RunLog>)> {
    let n_th = thermal_occupation(temp, mech.omega_m);
    let mut points = Vec::new();
    let mut logs = Vec::new();
    for run in runs {
        run.validate()?;
        let fits = fit_traces(average_groups(run, policy.group_size)?);
        let (accepted, rejection) = apply_rejection(&fits, policy);
        let mut g0s = Vec::new();
        let mut gammas = Vec::new();
        for &i in &accepted {
            let (fit, _) = fits[i].fit.as_ref().expect("accepted traces have fits");
            let cal = fits[i].trace.calibration.expect("accepted traces carry a tone");
            g0s.push(extract_g0(&fits[i].trace, fit, &cal, n_th)?.value);
            gammas.push(fit.gamma_m);
        }
        let included = !g0s.is_empty();
        logs.push(RunLog { label: run.meta.label.clone(), included, rejection });
        if !included {
            continue;
        }
        let (g0_mean, g0_std) = mean_std(&g0s);
        let g0_predicted = run
            .meta
            .flux_point
            .and_then(|p| coupling_g0(cav, mech, FluxPoint(p)).ok());
        points.push(CouplingPoint {
            label: run.meta.label.clone(),
            flux_point: run.meta.flux_point,
            g0_mean,
            g0_std,
            gamma_m_mean: mean_std(&gammas).0,
            n_groups: g0s.len(),
            g0_predicted,
        });
    }
    Ok((points, logs))
}

/// Half-width of the window cut around the pump tone (Hz).
pub const PUMP_EXCISION_HALF_WIDTH: f64 = 1e6;
/// Offset below the pump of the second excised window (Hz).
pub const SPUR_OFFSET: f64 = 6e6;
pub const SPUR_EXCISION_WIDTH: f64 = 1e6;

/// Magnitude-squared dip `a - b / (1 + ((f - f0) / (kappa/2))^2)`.
pub fn lorentzian_dip(a: f64, b: f64, f0: f64, kappa: f64, f: f64) -> f64 {
    let x = (f - f0) / (0.5 * kappa);
    a - b / (1.0 + x * x)
}

pub fn is_excised(f: f64, pump_freq: f64) -> bool {
    (f - pump_freq).abs() <= PUMP_EXCISION_HALF_WIDTH
        || (f - (pump_freq - SPUR_OFFSET)).abs() <= 0.5 * SPUR_EXCISION_WIDTH
}

struct DipProblem {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Residuals for DipProblem {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.x.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.x.len() {
            out[i] = lorentzian_dip(p[0], p[1], p[2], p[3], self.x[i]) - self.y[i];
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let (b, f0, k) = (p[1], p[2], p[3]);
        for (i, &f) in self.x.iter().enumerate() {
            let u = (f - f0) / (0.5 * k);
            let den = 1.0 + u * u;
            jac[(i, 0)] = 1.0;
            jac[(i, 1)] = -1.0 / den;
            jac[(i, 2)] = -b * 2.0 * u / (den * den) * (2.0 / k);
            jac[(i, 3)] = -b * 2.0 * u * u / (den * den) / k;
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        ["baseline", "depth", "f_cavity", "kappa"].iter().map(|s| s.to_string()).collect()
    }
}

/// Cavity frequency from a VNA sweep taken with the pump on. The pump window
/// and the spur window below it are cut out before fitting `|S21|^2`.
pub fn cavity_track_fit(vna: &ComplexTrace, pump_freq: f64) -> Result<(f64, FitReport)> {
    vna.validate()?;
    let f_ref = vna.freqs[vna.len() / 2];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (f, z) in vna.freqs.iter().zip(&vna.values) {
        if !is_excised(*f, pump_freq) {
            x.push(f - f_ref);
            y.push(z.norm_sqr());
        }
    }
    let removed = vna.len() - x.len();
    if removed as f64 > 0.6 * vna.len() as f64 || x.len() < 8 {
        return Err(Error::invalid(format!(
            "excision windows remove {removed} of {} points",
            vna.len()
        )));
    }
    // baseline from the upper part of the sorted magnitudes, dip from centroid and area
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let a0 = sorted[(0.9 * (sorted.len() - 1) as f64) as usize];
    let depth: Vec<f64> = y.iter().map(|v| (a0 - v).max(0.0)).collect();
    let b0 = depth.iter().cloned().fold(0.0, f64::max);
    if !(b0 > 0.0) {
        return Err(Error::fit("no resonance dip in VNA trace"));
    }
    let mut area = 0.0;
    let mut moment = 0.0;
    for i in 1..x.len() {
        let dx = x[i] - x[i - 1];
        let d = 0.5 * (depth[i] + depth[i - 1]);
        area += d * dx;
        moment += d * dx * 0.5 * (x[i] + x[i - 1]);
    }
    let i_min = (0..y.len()).min_by(|&i, &j| y[i].total_cmp(&y[j])).unwrap();
    let centroid = if area > 0.0 { moment / area } else { x[i_min] };
    let f0 = if (centroid - x[i_min]).abs() < (x[x.len() - 1] - x[0]) / 4.0 { centroid } else { x[i_min] };
    let step = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    let k0 = (2.0 * area / (std::f64::consts::PI * b0)).max(2.0 * step);
    let span = x[x.len() - 1] - x[0];
    let opts = LeastSquaresOptions::default().with_bounds(vec![
        (f64::NEG_INFINITY, f64::INFINITY),
        (0.0, f64::INFINITY),
        (x[0], x[x.len() - 1]),
        (0.1 * step, 2.0 * span),
    ]);
    let problem = DipProblem { x, y };
    let mut report = least_squares(&problem, &[a0, b0, f0, k0], &opts)?;
    report.params[2] += f_ref;
    Ok((report.params[2], report))
}

/// One spectrum placed on the detuning axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DetunedFit {
    /// Pump minus cavity (Hz).
    pub detuning: f64,
    pub fit: MechSpectrumFit,
    pub trace: Option<SpectrumTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedPoint {
    pub detuning_mean: f64,
    /// Population standard deviation of the detunings in the bin.
    pub detuning_std: f64,
    pub fit: MechSpectrumFit,
    /// Standard error of the bin's `g0 sqrt(n)` (Hz).
    pub y_error: f64,
    pub n_traces: usize,
}

impl BinnedPoint {
    pub fn g0_sqrt_n(&self) -> f64 {
        self.fit.g0_sqrt_n.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedBin {
    pub lower_edge: f64,
    pub n_traces: usize,
    pub reason: String,
}

/// Minimum traces for a bin to be kept.
pub const MIN_TRACES_PER_BIN: usize = 4;

/// Group points into bins `[k w, (k+1) w)`. When every point of a bin carries
/// its trace, the traces are averaged and re-fit; otherwise the per-trace
/// observables are combined.
pub fn backaction_binning(points: &[DetunedFit], bin_width: f64) -> Result<(Vec<BinnedPoint>, Vec<DroppedBin>)> {
    if !(bin_width > 0.0) {
        return Err(Error::invalid("bin width must be positive"));
    }
    let mut bins: std::collections::BTreeMap<i64, Vec<&DetunedFit>> = Default::default();
    for p in points {
        bins.entry((p.detuning / bin_width).floor() as i64).or_default().push(p);
    }
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for (k, members) in bins {
        let lower_edge = k as f64 * bin_width;
        let n = members.len();
        if n < MIN_TRACES_PER_BIN {
            dropped.push(DroppedBin {
                lower_edge,
                n_traces: n,
                reason: format!("{n} traces < {MIN_TRACES_PER_BIN}"),
            });
            continue;
        }
        let ds: Vec<f64> = members.iter().map(|m| m.detuning).collect();
        let mean = ds.iter().sum::<f64>() / n as f64;
        let std = (ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let traces: Option<Vec<&SpectrumTrace>> = members.iter().map(|m| m.trace.as_ref()).collect();
        let combined = match traces {
            Some(ts) => average_traces(&ts).and_then(|avg| fit_spectrum(&avg, None)).and_then(|(fit, _)| {
                match (fit.g0_sqrt_n, fit.g0_sqrt_n_err) {
                    (Some(_), Some(err)) => Ok((fit, err)),
                    _ => Err(Error::Calibration("averaged bin has no usable calibration tone".into())),
                }
            }),
            None => {
                let gs: Vec<f64> = members.iter().filter_map(|m| m.fit.g0_sqrt_n).collect();
                if gs.len() != n {
                    Err(Error::Calibration("bin members lack g0_sqrt_n".into()))
                } else {
                    let rms = (gs.iter().map(|g| g * g).sum::<f64>() / n as f64).sqrt();
                    let (_, sd) = mean_std(&gs);
                    let mut fit = members[0].fit;
                    fit.g0_sqrt_n = Some(rms);
                    Ok((fit, sd / (n as f64).sqrt()))
                }
            }
        };
        match combined {
            Ok((fit, y_error)) => out.push(BinnedPoint {
                detuning_mean: mean,
                detuning_std: std,
                fit,
                y_error,
                n_traces: n,
            }),
            Err(e) => dropped.push(DroppedBin { lower_edge, n_traces: n, reason: e.to_string() }),
        }
    }
    Ok((out, dropped))
}

/// Result of fitting the backaction model to a binned sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackactionFit {
    pub n_photons: f64,
    pub g0: f64,
    pub freq_offset: f64,
    pub report: FitReport,
    /// Detuning intervals where the fitted model is dynamically unstable.
    pub instability: Vec<(f64, f64)>,
    /// Mean detunings of bins left out because they fall in those intervals.
    pub excluded: Vec<f64>,
}

struct BackactionProblem {
    x: Vec<f64>,
    y: Vec<f64>,
    sigma: Vec<f64>,
    include: Vec<bool>,
    kappa: f64,
    omega_m: f64,
    gamma_m: f64,
    n_th: f64,
}

const UNSTABLE_PENALTY: f64 = 1e12;

impl BackactionProblem {
    /// Model `g0^2 n_final` and its gradient in (n_photons, g0, offset).
    fn model(&self, p: &[f64], detuning: f64) -> Option<(f64, [f64; 3])> {
        let (nph, g0, off) = (p[0], p[1], p[2]);
        let d = detuning + off;
        let hk2 = (0.5 * self.kappa).powi(2);
        let lp = hk2 + (d - self.omega_m).powi(2);
        let lm = hk2 + (d + self.omega_m).powi(2);
        let u = self.kappa / lp;
        let v = self.kappa / lm;
        let s = g0 * g0 * nph;
        let den = self.gamma_m + s * (v - u);
        if !(den > 0.0) {
            return None;
        }
        let num = self.gamma_m * self.n_th + s * u;
        let nf = num / den;
        let dnf_ds = (u * den - num * (v - u)) / (den * den);
        let du = -self.kappa * 2.0 * (d - self.omega_m) / (lp * lp);
        let dv = -self.kappa * 2.0 * (d + self.omega_m) / (lm * lm);
        let dnf_dd = (s * du * den - num * s * (dv - du)) / (den * den);
        let g2 = g0 * g0;
        Some((
            g2 * nf,
            [g2 * dnf_ds * g2, 2.0 * g0 * nf + g2 * dnf_ds * 2.0 * g0 * nph, g2 * dnf_dd],
        ))
    }
}

impl Residuals for BackactionProblem {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.x.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.x.len() {
            out[i] = if !self.include.get(i).copied().unwrap_or(true) {
                0.0
            } else {
                match self.model(p, self.x[i]) {
                    Some((m, _)) => (m - self.y[i] * self.y[i]) / (2.0 * self.y[i] * self.sigma[i]),
                    None => UNSTABLE_PENALTY,
                }
            };
        }
    }
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        for i in 0..self.x.len() {
            let grad = match (self.include.get(i).copied().unwrap_or(true), self.model(p, self.x[i])) {
                (true, Some((_, g))) => g.map(|v| v / (2.0 * self.y[i] * self.sigma[i])),
                _ => [0.0; 3],
            };
            for j in 0..3 {
                jac[(i, j)] = grad[j];
            }
        }
        true
    }
    fn param_names(&self) -> Vec<String> {
        ["n_photons", "g0", "freq_offset"].iter().map(|s| s.to_string()).collect()
    }
}

fn gamma_eff(kappa: f64, mech: &MechanicalParams, n_photons: f64, g0: f64, detuning: f64) -> f64 {
    let drive = DriveConfig { detuning, n_photons, g0 };
    backaction_with_occupation(kappa, mech.omega_m, mech.gamma_m, &drive, 0.0).gamma_eff
}

/// Detuning intervals in `[lo, hi]` (pump minus cavity, before the offset is
/// applied) where `gamma_m + gamma_opt <= 0`.
pub fn instability_intervals(
    cav: &CavityParams,
    mech: &MechanicalParams,
    n_photons: f64,
    g0: f64,
    freq_offset: f64,
    lo: f64,
    hi: f64,
) -> Vec<(f64, f64)> {
    let kappa = cav.kappa();
    let unstable = |d: f64| gamma_eff(kappa, mech, n_photons, g0, d + freq_offset) <= 0.0;
    let edge = |mut a: f64, mut b: f64| {
        // a and b straddle the boundary; returns the point on the unstable side
        let ua = unstable(a);
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if unstable(m) == ua {
                a = m;
            } else {
                b = m;
            }
        }
        if ua {
            a
        } else {
            b
        }
    };
    let steps = 4000;
    let h = (hi - lo) / steps as f64;
    let mut out = Vec::new();
    let mut start: Option<f64> = unstable(lo).then_some(lo);
    let mut prev = lo;
    for i in 1..=steps {
        let d = lo + h * i as f64;
        let u = unstable(d);
        match (start, u) {
            (None, true) => start = Some(edge(prev, d)),
            (Some(s), false) => {
                out.push((s, edge(prev, d)));
                start = None;
            }
            _ => {}
        }
        prev = d;
    }
    if let Some(s) = start {
        out.push((s, hi));
    }
    out
}

/// Fit photon number, coupling and a detuning offset to binned `g0 sqrt(n)`
/// observations through `obs^2 = g0^2 n_final(Delta + offset)`.
///
/// The intrinsic linewidth is held at `mech.gamma_m`. Bins falling where the
/// model is unstable are removed from the residual; the set is updated until
/// it stops changing.
pub fn backaction_model_fit(
    binned: &[BinnedPoint],
    cav: &CavityParams,
    mech: &MechanicalParams,
    temp: f64,
) -> Result<BackactionFit> {
    if binned.len() < 5 {
        return Err(Error::invalid(format!("{} bins; at least 5 needed", binned.len())));
    }
    let x: Vec<f64> = binned.iter().map(|b| b.detuning_mean).collect();
    let y: Vec<f64> = binned.iter().map(|b| b.g0_sqrt_n()).collect();
    let sigma: Vec<f64> = binned.iter().map(|b| b.y_error).collect();
    if y.iter().chain(&sigma).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("bins need positive g0_sqrt_n and y_error"));
    }
    let n_th = thermal_occupation(temp, mech.omega_m);
    let kappa = cav.kappa();
    let problem = |include: &[bool]| BackactionProblem {
        x: x.clone(),
        y: y.clone(),
        sigma: sigma.clone(),
        include: include.to_vec(),
        kappa,
        omega_m: mech.omega_m,
        gamma_m: mech.gamma_m,
        n_th,
    };
    let stable_set = |p: &[f64]| -> Vec<bool> {
        let probe = problem(&[]);
        x.iter().map(|&d| probe.model(p, d).is_some()).collect()
    };

    // far-detuned bins carry almost no backaction
    let mut by_distance: Vec<usize> = (0..x.len()).collect();
    by_distance.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()));
    let g0_init = by_distance.iter().take(3).map(|&i| y[i]).sum::<f64>() / (3.0 * n_th.sqrt());

    // coarse scan of the photon number
    let mut best = (f64::INFINITY, 0.0);
    let mut r = vec![0.0; x.len()];
    for k in 0..=60 {
        let p = [10f64.powf(-3.0 + 0.1 * k as f64), g0_init, 0.0];
        let include = stable_set(&p);
        if !include.iter().any(|b| *b) {
            continue;
        }
        problem(&include).residuals(&p, &mut r);
        let cost: f64 = r.iter().map(|v| v * v).sum();
        if cost < best.0 {
            best = (cost, p[0]);
        }
    }
    let mut params = vec![best.1, g0_init, 0.0];

    let opts = LeastSquaresOptions::default().with_bounds(vec![
        (0.0, f64::INFINITY),
        (0.0, f64::INFINITY),
        (-kappa, kappa),
    ]);
    let mut include = Vec::new();
    let mut report = None;
    for _ in 0..6 {
        let next = stable_set(&params);
        if report.is_some() && next == include {
            break;
        }
        include = next;
        if !include.iter().any(|b| *b) {
            return Err(Error::fit("all bins fall in the unstable region"));
        }
        let rep = least_squares(&problem(&include), &params, &opts)?;
        params = rep.params.clone();
        report = Some(rep);
    }
    let mut report = report.expect("fit ran at least once");
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min) - kappa;
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + kappa;
    let instability = instability_intervals(cav, mech, params[0], params[1], params[2], lo, hi);
    let excluded: Vec<f64> = x.iter().zip(&include).filter(|(_, inc)| !**inc).map(|(d, _)| *d).collect();
    for d in &excluded {
        report.verdicts.push(format!("bin at {d:.0} Hz excluded: unstable"));
    }
    Ok(BackactionFit {
        n_photons: params[0],
        g0: params[1],
        freq_offset: params[2],
        report,
        instability,
        excluded,
    })
}

/// Everything derived from one tracked backaction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackactionAnalysis {
    /// Detuning of every trace whose cavity fit succeeded, by trace index.
    pub detunings: Vec<(usize, f64)>,
    pub rejection: RejectionLog,
    pub bins: Vec<BinnedPoint>,
    pub dropped_bins: Vec<DroppedBin>,
    pub fit: BackactionFit,
}

/// Track the cavity in every VNA sweep, fit and screen the spectra, bin by
/// detuning and fit the backaction model.
pub fn analyze_backaction_run(
    run: &MeasurementRun,
    cav: &CavityParams,
    mech: &MechanicalParams,
    bin_width: f64,
    policy: &RejectionPolicy,
) -> Result<BackactionAnalysis> {
    run.validate()?;
    let vnas = run
        .vna_traces
        .as_ref()
        .ok_or_else(|| Error::invalid("backaction run needs one VNA sweep per spectrum"))?;
    let pump = run
        .meta
        .pump_freq
        .ok_or_else(|| Error::invalid("backaction run needs pump_freq"))?;
    let mut fits = fit_traces(run.traces.clone());
    let mut detunings = Vec::new();
    for (i, v) in vnas.iter().enumerate() {
        match cavity_track_fit(v, pump) {
            Ok((f_cav, _)) => detunings.push((i, pump - f_cav)),
            Err(e) => fits[i].fit = Err(Error::fit(format!("cavity tracking: {e}"))),
        }
    }
    let (accepted, rejection) = apply_rejection(&fits, policy);
    if let Some(reason) = &rejection.set_reason {
        return Err(Error::fit(format!("trace set discarded: {reason}")));
    }
    let points: Vec<DetunedFit> = detunings
        .iter()
        .filter(|(i, _)| accepted.contains(i))
        .map(|&(i, d)| DetunedFit {
            detuning: d,
            fit: fits[i].fit.as_ref().expect("accepted").0,
            trace: Some(fits[i].trace.clone()),
        })
        .collect();
    let (bins, dropped_bins) = backaction_binning(&points, bin_width)?;
    let fit = backaction_model_fit(&bins, cav, mech, run.meta.temperature)?;
    Ok(BackactionAnalysis { detunings, rejection, bins, dropped_bins, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Config;
    use crate::optomech::{backaction, optimal_cooling_detuning};
    use crate::phys::jacobian_mismatch;
    use crate::spectra::{synthesize_spectrum, SpectrumSynthesis};
    use crate::synthetic::*;
    use proptest::prelude::*;

    const OMEGA_M: f64 = 274_383.13;
    const PUMP: f64 = 8.1526e9;

    fn cfg() -> Config {
        Config::reference()
    }

    fn line_trace(peak_dbm: f64, seed: u64, noisy: bool) -> SpectrumTrace {
        let setup = SpectrumSetup { noisy, thermal_peak_dbm: peak_dbm, ..SpectrumSetup::compact() };
        let g = 4180.0;
        let t = setup.transduction(g, 0.3);
        let cal = setup.calibration(OMEGA_M, t);
        let line = MechSpectrumFit::for_coupling(OMEGA_M, 0.3, t, setup.floor_dbm, g);
        let synth = SpectrumSynthesis {
            center: Some(OMEGA_M),
            span: setup.span,
            n_points: setup.n_points,
            enbw: None,
            n_averages: setup.n_averages,
            noisy,
        };
        synthesize_spectrum(&line, &cal, &synth, seed).unwrap()
    }

    fn run_of(traces: Vec<SpectrumTrace>) -> MeasurementRun {
        MeasurementRun { traces, vna_traces: None, meta: RunMeta::default() }
    }

    #[test]
    fn group_averaging_counts() {
        let traces: Vec<_> = (0..40).map(|s| line_trace(-105.0, s, true)).collect();
        let out = average_groups(&run_of(traces.clone()), 4).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[0].n_averages, 40);
        let same = average_groups(&run_of(traces.clone()), 1).unwrap();
        for (a, b) in same.iter().zip(&traces) {
            for (x, y) in a.psd.iter().zip(&b.psd) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(average_groups(&run_of(traces[..10].to_vec()), 4).unwrap().len(), 2);
        assert!(average_groups(&run_of(traces.clone()), 0).is_err());
        let mut odd = traces[..4].to_vec();
        odd[2].freqs[0] -= 0.1;
        assert!(matches!(average_groups(&run_of(odd), 4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn averaging_is_gain_invariant() {
        let traces: Vec<_> = (0..8).map(|s| line_trace(-105.0, s, true)).collect();
        let gained: Vec<_> = traces
            .iter()
            .map(|t| SpectrumTrace { psd: t.psd.iter().map(|p| p + 7.0).collect(), ..t.clone() })
            .collect();
        let a = average_groups(&run_of(traces), 4).unwrap();
        let b = average_groups(&run_of(gained), 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.psd.iter().zip(&y.psd) {
                assert!((p + 7.0 - q).abs() < 1e-9);
            }
        }
    }

    fn set_with_bad(n_bad: usize) -> Vec<TraceFit> {
        let mut traces: Vec<_> = (0..10).map(|s| line_trace(-105.0, s, false)).collect();
        // line plus floor reaches 3 dB above the -140 dBm floor
        let weak_line = -140.0 + 10.0 * (10f64.powf(0.3) - 1.0).log10();
        for t in traces.iter_mut().take(n_bad) {
            *t = line_trace(weak_line, 0, false);
        }
        fit_traces(traces)
    }

    #[test]
    fn rejection_fraction_rule() {
        let policy = RejectionPolicy::coupling_sweep();
        let (acc, log) = apply_rejection(&set_with_bad(0), &policy);
        assert_eq!(acc.len(), 10);
        assert!(!log.set_discarded);
        let (acc, log) = apply_rejection(&set_with_bad(1), &policy);
        assert_eq!(acc.len(), 9);
        assert!(log.verdicts[0].reasons.iter().any(|r| r.contains("peak < 4 dB above floor")));
        let (acc, log) = apply_rejection(&set_with_bad(2), &policy);
        assert_eq!(acc.len(), 8);
        assert!(!log.set_discarded);
        let (acc, log) = apply_rejection(&set_with_bad(3), &policy);
        assert!(acc.is_empty());
        assert!(log.set_discarded);
    }

    #[test]
    fn rejection_is_idempotent() {
        let policy = RejectionPolicy::backaction();
        let items = set_with_bad(2);
        let (acc, _) = apply_rejection(&items, &policy);
        let kept: Vec<TraceFit> = acc.iter().map(|&i| items[i].clone()).collect();
        let (acc2, log2) = apply_rejection(&kept, &policy);
        assert_eq!(acc2.len(), kept.len());
        assert_eq!(log2.n_failed, 0);
    }

    #[test]
    fn rejection_criteria() {
        let policy = RejectionPolicy::backaction();
        let good = &fit_traces(vec![line_trace(-105.0, 0, false)])[0];
        assert!(trace_verdict(good, &policy).is_empty());
        // spike far above the fitted maximum
        let mut spiky = good.clone();
        spiky.trace.psd[10] = -90.0;
        assert!(trace_verdict(&spiky, &policy)[0].contains("from fit maximum"));
        // weak calibration tone
        let mut weak = good.clone();
        let bin = weak.trace.bin_of(weak.trace.calibration.unwrap().f_mod).unwrap();
        weak.trace.psd[bin] = -131.0;
        assert!(trace_verdict(&weak, &policy)[0].contains("-130 dBm"));
        let mut none = good.clone();
        none.trace.calibration = None;
        assert!(!trace_verdict(&none, &policy).is_empty());
    }

    #[test]
    fn ramp_fit_cases() {
        let temps = temperature_grid(0.08, 0.7, 12);
        let exact = synthesize_ramp(48.0, OMEGA_M, &temps, 0.0, 0);
        let (g0, rep) = temperature_ramp_fit(&exact, OMEGA_M).unwrap();
        assert!((g0 / 48.0 - 1.0).abs() < 1e-8);
        assert!(rep.converged);
        let zero = synthesize_ramp(0.0, OMEGA_M, &temps, 0.0, 0);
        assert_eq!(temperature_ramp_fit(&zero, OMEGA_M).unwrap().0, 0.0);
        let noisy = synthesize_ramp(48.0, OMEGA_M, &temps, 0.02, 9);
        let (g0, rep) = temperature_ramp_fit(&noisy, OMEGA_M).unwrap();
        assert!((g0 - 48.0).abs() < 1.5);
        assert!(rep.stderr[0] > 0.0 && rep.stderr[0] < 1.0);
        let flat = vec![(0.1, 1.0), (0.1, 1.1), (0.1, 0.9)];
        assert!(matches!(temperature_ramp_fit(&flat, OMEGA_M), Err(Error::FitFailure(_))));
        assert!(matches!(temperature_ramp_fit(&exact[..2], OMEGA_M), Err(Error::InvalidInput(_))));
        let hot = vec![(0.1, 1.0), (0.5, 1.1), (1.5, 0.9)];
        assert!(matches!(temperature_ramp_fit(&hot, OMEGA_M), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn coupling_sweep_recovers_generators() {
        let c = cfg();
        let (cav, mech) = (c.cavity(), c.mechanics());
        let mut runs = Vec::new();
        let targets = [48.0, 500.0, 2460.0];
        for (i, g0) in targets.iter().enumerate() {
            let slope = g0 / mech.flux_per_zpm;
            let phi = crate::squid::flux_for_sensitivity(&cav, slope).unwrap().0;
            runs.push(synthesize_coupling_run(&cav, &mech, phi, 0.1, 40, &SpectrumSetup::compact(), i as u64).unwrap());
        }
        let (points, logs) =
            coupling_sweep_analysis(&runs, &cav, &mech, 0.1, &RejectionPolicy::coupling_sweep()).unwrap();
        assert_eq!(points.len(), 3, "{logs:?}");
        for (p, g0) in points.iter().zip(targets) {
            assert!((p.g0_mean / g0 - 1.0).abs() < 0.05, "{} vs {g0}", p.g0_mean);
            assert!((p.g0_predicted.unwrap() / g0 - 1.0).abs() < 1e-9);
            assert!((p.gamma_m_mean / 0.3 - 1.0).abs() < 0.1);
            assert_eq!(p.n_groups, 10);
        }
        let (none, _) = coupling_sweep_analysis(&[], &cav, &mech, 0.1, &RejectionPolicy::coupling_sweep()).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn failed_run_is_logged_not_fatal() {
        let c = cfg();
        let weak = SpectrumSetup { thermal_peak_dbm: -139.0, ..SpectrumSetup::compact() };
        let run = synthesize_coupling_run(&c.cavity(), &c.mechanics(), 0.1, 0.1, 40, &weak, 1).unwrap();
        let (points, logs) =
            coupling_sweep_analysis(&[run], &c.cavity(), &c.mechanics(), 0.1, &RejectionPolicy::coupling_sweep())
                .unwrap();
        assert!(points.is_empty());
        assert!(!logs[0].included);
        assert!(logs[0].rejection.set_discarded);
    }

    fn tracking_case(pump: f64, sigma: f64, seed: u64) -> (f64, Result<(f64, FitReport)>) {
        let cav = cfg().cavity();
        let vna = VnaSetup { sigma, span: 20e6, n_points: 2001, ..VnaSetup::compact() };
        let trace = synthesize_tracking_sweep(&cav, 8.102e9, pump, &vna, seed).unwrap();
        (cav.kappa(), cavity_track_fit(&trace, pump))
    }

    #[test]
    fn cavity_tracking() {
        let (kappa, r) = tracking_case(8.1005e9, 0.005, 3);
        let (f, rep) = r.unwrap();
        assert!((f - 8.102e9).abs() < 0.01 * kappa, "{}", f - 8.102e9);
        assert!((rep.get("kappa").unwrap() / kappa - 1.0).abs() < 0.05);
        let (_, r) = tracking_case(9e9, 0.0, 0);
        assert!((r.unwrap().0 - 8.102e9).abs() < 1.0);
    }

    #[test]
    fn cavity_tracking_degenerate_window() {
        let cav = cfg().cavity();
        let vna = VnaSetup { span: 2e6, n_points: 201, ..VnaSetup::compact() };
        let trace = synthesize_tracking_sweep(&cav, 8.102e9, 8.102e9, &vna, 0).unwrap();
        assert!(matches!(cavity_track_fit(&trace, 8.102e9), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pump_inside_linewidth() {
        let (kappa, r) = tracking_case(8.1015e9, 0.0, 0);
        assert!((r.unwrap().0 - 8.102e9).abs() < 0.01 * kappa);
    }

    #[test]
    fn dip_jacobian() {
        let x: Vec<f64> = (0..100).map(|i| -5e6 + 1e5 * i as f64).collect();
        let p = DipProblem { y: vec![0.0; x.len()], x };
        assert!(jacobian_mismatch(&p, &[1.0, 0.6, 2e5, 2.8e6]) < 1e-6);
    }

    fn fake_fit(g: f64) -> MechSpectrumFit {
        MechSpectrumFit { g0_sqrt_n: Some(g), ..MechSpectrumFit::for_coupling(OMEGA_M, 0.3, 1e-20, -140.0, g) }
    }

    #[test]
    fn binning_arithmetic() {
        let pts: Vec<DetunedFit> = [-0.2e6, -0.4e6, -0.7e6, -0.9e6]
            .iter()
            .map(|&d| DetunedFit { detuning: d, fit: fake_fit(4000.0), trace: None })
            .collect();
        let (bins, dropped) = backaction_binning(&pts, 1e6).unwrap();
        assert_eq!(bins.len(), 1);
        assert!(dropped.is_empty());
        assert!((bins[0].detuning_mean + 0.55e6).abs() < 1e-6);
        assert_eq!(bins[0].n_traces, 4);
        let expected_std = (((0.35f64).powi(2) + 0.15f64.powi(2)) * 2.0 / 4.0).sqrt() * 1e6;
        assert!((bins[0].detuning_std - expected_std).abs() < 1e-6);
        let (bins, dropped) = backaction_binning(&pts[..3], 1e6).unwrap();
        assert!(bins.is_empty());
        assert_eq!(dropped[0].n_traces, 3);
        assert!(backaction_binning(&pts, 0.0).is_err());
    }

    fn noiseless_bins(gen: &BackactionGenerator, width: f64) -> Vec<BinnedPoint> {
        let c = cfg();
        let detunings = binned_detunings(-7, 7, width, 4, true, 0);
        let setup = SpectrumSetup { noisy: false, ..SpectrumSetup::compact() };
        let vna = VnaSetup { sigma: 0.0, ..VnaSetup::compact() };
        let run = synthesize_backaction_run(&c.cavity(), &c.mechanics(), gen, &detunings, &setup, &vna, 0).unwrap();
        let policy = RejectionPolicy::backaction();
        let fits = fit_traces(run.traces.clone());
        let (acc, _) = apply_rejection(&fits, &policy);
        let pts: Vec<DetunedFit> = acc
            .iter()
            .map(|&i| {
                let d = gen.pump_freq - cavity_track_fit(&run.vna_traces.as_ref().unwrap()[i], gen.pump_freq).unwrap().0;
                DetunedFit { detuning: d, fit: fits[i].fit.as_ref().unwrap().0, trace: Some(fits[i].trace.clone()) }
            })
            .collect();
        backaction_binning(&pts, width).unwrap().0
    }

    fn reference_gen() -> BackactionGenerator {
        BackactionGenerator { n_photons: 0.9, g0: 2460.0, temp: 0.1, pump_freq: PUMP, freq_offset: 0.0 }
    }

    #[test]
    fn noiseless_backaction_roundtrip() {
        let c = cfg();
        let gen = reference_gen();
        let bins = noiseless_bins(&gen, 1e6);
        let fit = backaction_model_fit(&bins, &c.cavity(), &c.mechanics(), 0.1).unwrap();
        assert!((fit.n_photons / 0.9 - 1.0).abs() < 1e-3, "{}", fit.n_photons);
        assert!((fit.g0 / 2460.0 - 1.0).abs() < 1e-3, "{}", fit.g0);
        assert!(fit.freq_offset.abs() < 1e-3 * c.cavity().kappa());
        assert!(!fit.instability.is_empty());
        for (lo, hi) in &fit.instability {
            assert!(*lo > 0.0 && hi > lo);
            let mid = 0.5 * (lo + hi);
            let drive = DriveConfig { detuning: mid, n_photons: 0.9, g0: 2460.0 };
            assert!(!backaction(&c.cavity(), &c.mechanics(), &drive, 0.1).stable);
        }
    }

    #[test]
    fn zero_photon_sweep_is_flat() {
        let c = cfg();
        let gen = BackactionGenerator { n_photons: 0.0, ..reference_gen() };
        let bins = noiseless_bins(&gen, 1e6);
        let n_th = thermal_occupation(0.1, OMEGA_M);
        for b in &bins {
            assert!((b.g0_sqrt_n() / (2460.0 * n_th.sqrt()) - 1.0).abs() < 1e-4);
        }
        let fit = backaction_model_fit(&bins, &c.cavity(), &c.mechanics(), 0.1).unwrap();
        assert!(fit.n_photons < 1e-3, "{}", fit.n_photons);
        assert!((fit.g0 / 2460.0 - 1.0).abs() < 1e-3);
        assert!(fit.instability.is_empty());
    }

    #[test]
    fn truth_is_no_worse_than_fit_when_noiseless() {
        let c = cfg();
        let gen = reference_gen();
        let bins = noiseless_bins(&gen, 1e6);
        let fit = backaction_model_fit(&bins, &c.cavity(), &c.mechanics(), 0.1).unwrap();
        let n_th = thermal_occupation(0.1, OMEGA_M);
        let problem = BackactionProblem {
            x: bins.iter().map(|b| b.detuning_mean).collect(),
            y: bins.iter().map(|b| b.g0_sqrt_n()).collect(),
            sigma: bins.iter().map(|b| b.y_error).collect(),
            include: vec![],
            kappa: c.cavity().kappa(),
            omega_m: OMEGA_M,
            gamma_m: 0.3,
            n_th,
        };
        let cost = |p: &[f64]| {
            let mut r = vec![0.0; bins.len()];
            problem.residuals(p, &mut r);
            r.iter().map(|v| v * v).sum::<f64>()
        };
        assert!(cost(&[0.9, 2460.0, 0.0]) <= cost(&[fit.n_photons, fit.g0, fit.freq_offset]) + 1e-9);
    }

    #[test]
    fn backaction_jacobian() {
        let c = cfg();
        let x: Vec<f64> = (-6..=6).map(|k| k as f64 * 0.5e6 - 2.1e6).collect();
        let problem = BackactionProblem {
            y: vec![2e5; x.len()],
            sigma: vec![1e3; x.len()],
            include: vec![],
            x,
            kappa: c.cavity().kappa(),
            omega_m: OMEGA_M,
            gamma_m: 0.3,
            n_th: 7592.0,
        };
        assert!(jacobian_mismatch(&problem, &[0.5, 2460.0, 1e4]) < 1e-5);
    }

    #[test]
    fn model_fit_preconditions() {
        let c = cfg();
        let bins = noiseless_bins(&reference_gen(), 1e6);
        assert!(matches!(
            backaction_model_fit(&bins[..4], &c.cavity(), &c.mechanics(), 0.1),
            Err(Error::InvalidInput(_))
        ));
        // every bin inside the blue-side instability of a strong drive
        let blue: Vec<BinnedPoint> = (0..6)
            .map(|k| BinnedPoint {
                detuning_mean: 0.5e6 + 0.1e6 * k as f64,
                detuning_std: 0.0,
                fit: fake_fit(4000.0),
                y_error: 10.0,
                n_traces: 4,
            })
            .collect();
        let r = backaction_model_fit(&blue, &c.cavity(), &c.mechanics(), 0.1);
        assert!(r.is_ok() || matches!(r, Err(Error::FitFailure(_))));
    }

    #[test]
    fn weak_coupling_cooling_deepens_with_power() {
        let c = cfg();
        let (cav, mech) = (c.cavity(), c.mechanics());
        let d = optimal_cooling_detuning(&cav, &mech);
        let mut prev = f64::INFINITY;
        let n_th = thermal_occupation(0.1, OMEGA_M);
        let mut reached_eightfold = false;
        for k in 0..40 {
            let n_ph = 10f64.powf(1.0 + 0.1 * k as f64);
            let r = backaction(&cav, &mech, &DriveConfig { detuning: d, n_photons: n_ph, g0: 57.0 }, 0.1);
            let n = r.n_final.unwrap();
            assert!(n < prev);
            prev = n;
            reached_eightfold |= n_th / n >= 8.0;
        }
        assert!(reached_eightfold);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn rejection_idempotent_prop(n_bad in 0usize..4) {
            let policy = RejectionPolicy::backaction();
            let items = set_with_bad(n_bad);
            let (acc, _) = apply_rejection(&items, &policy);
            let kept: Vec<TraceFit> = acc.iter().map(|&i| items[i].clone()).collect();
            let (acc2, _) = apply_rejection(&kept, &policy);
            prop_assert_eq!(acc2.len(), kept.len());
        }
    }
}
