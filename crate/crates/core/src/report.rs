//! Whole-dataset analysis: `results.json` and one plot-ready CSV per figure.
//!
//! A dataset directory may contain
//!
//! ```text
//! paper.cfg            flat key-value config (required)
//! s21.csv              cavity transmission sweep
//! temp_ramp.csv        temp_k,g0_sqrt_n_hz
//! coupling/<run>/      one run directory per flux bias
//! backaction/          tracked detuning sweep
//! ```
//!
//! Missing inputs leave their section of the results empty.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ramp_points_from_csv, read_complex_trace, sweep_to_csv, Config};
use crate::manifest::read_run;
use crate::optomech::{
    backaction, cooperativity, detuning_sweep, min_phonon_bad_cavity, optimal_cooling_detuning, thermal_occupation,
    DriveConfig, KappaPolynomial,
};
use crate::phys::FitReport;
use crate::pipeline::{
    analyze_backaction_run, coupling_sweep_analysis, temperature_ramp_fit, BackactionAnalysis, CouplingPoint,
    RejectionPolicy, RunLog,
};
use crate::resonator::{
    circle_fit, q_coupling_real, q_internal, s21_full, CircleFit, ComplexTrace, EnvironmentParams, NotchParams,
    QiConvention,
};
use crate::spectra::{fit_spectrum, psd_model, MechSpectrumFit, SpectrumTrace};
use crate::squid::{coupling_g0, flux_map, flux_sensitivity, CavityParams, FluxPoint, MechanicalParams, EDGE_MARGIN};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BIN_WIDTH: f64 = 1e6;
/// Coupling used for the weak-coupling cooling curves.
pub const WEAK_G0: f64 = 57.0;
/// Cooling factor the weak-coupling photon number is chosen to reach.
pub const WEAK_COOLING_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S21Section {
    pub notch: NotchParams,
    pub environment: EnvironmentParams,
    pub q_internal: f64,
    pub q_internal_simple: f64,
    pub q_coupling_real: f64,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampSection {
    pub g0_hz: f64,
    pub g0_err_hz: f64,
    pub n_points: usize,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSection {
    pub points: Vec<CouplingPoint>,
    pub runs: Vec<RunLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackactionSection {
    pub n_photons: f64,
    pub n_photons_err: f64,
    pub g0_hz: f64,
    pub g0_err_hz: f64,
    pub freq_offset_hz: f64,
    pub freq_offset_err_hz: f64,
    pub cooperativity: f64,
    pub instability_hz: Vec<(f64, f64)>,
    pub analysis: BackactionAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedSection {
    pub thermal_occupation: f64,
    pub min_phonon_bad_cavity: f64,
    pub optimal_cooling_detuning_hz: f64,
    pub weak_coupling_photons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResults {
    pub schema_version: u32,
    pub config: Config,
    pub derived: DerivedSection,
    pub s21: Option<S21Section>,
    pub temperature_ramp: Option<RampSection>,
    pub coupling_sweep: Option<CouplingSection>,
    pub backaction: Option<BackactionSection>,
    /// Figure id to file name, in the output directory.
    pub figures: Vec<(String, String)>,
}

fn csv_line(s: &mut String, vals: &[f64]) {
    let cells: Vec<String> = vals.iter().map(|v| if v.is_finite() { v.to_string() } else { String::new() }).collect();
    let _ = writeln!(s, "{}", cells.join(","));
}

/// Magnitude (dB) and phase of measured and fitted transmission.
pub fn fig_cavity_response(trace: &ComplexTrace, fit: &CircleFit) -> String {
    let mut s = String::from("freq_hz,mag_db,phase_rad,fit_mag_db,fit_phase_rad\n");
    for (f, z) in trace.freqs.iter().zip(&trace.values) {
        let m = s21_full(&fit.notch, &fit.env, *f);
        csv_line(&mut s, &[*f, 20.0 * z.norm().log10(), z.arg(), 20.0 * m.norm().log10(), m.arg()]);
    }
    s
}

/// Complex-plane view of measured and fitted transmission.
pub fn fig_complex_plane(trace: &ComplexTrace, fit: &CircleFit) -> String {
    let mut s = String::from("freq_hz,re,im,fit_re,fit_im\n");
    for (f, z) in trace.freqs.iter().zip(&trace.values) {
        let m = s21_full(&fit.notch, &fit.env, *f);
        csv_line(&mut s, &[*f, z.re, z.im, m.re, m.im]);
    }
    s
}

/// Cavity frequency, slope and coupling over one flux period.
pub fn fig_flux_map(cav: &CavityParams, mech: &MechanicalParams, n: usize) -> String {
    let mut s = String::from("phi_phi0,f_cavity_hz,sensitivity_hz_per_phi0,g0_hz\n");
    let half = (0.5 - EDGE_MARGIN) * cav.flux_period * (1.0 - 1e-9);
    for i in 0..n {
        let phi = -half + 2.0 * half * i as f64 / (n - 1) as f64;
        let p = FluxPoint(phi);
        let (Ok(f), Ok(k)) = (flux_map(cav, p), flux_sensitivity(cav, p)) else { continue };
        csv_line(&mut s, &[phi, f, k, k.abs() * mech.flux_per_zpm]);
    }
    s
}

/// Spectrum with its fitted line and floor.
pub fn fig_spectrum(trace: &SpectrumTrace, fit: &MechSpectrumFit) -> String {
    let mut s = String::from("freq_hz,psd_dbm,fit_dbm,line_dbm\n");
    for (f, p) in trace.freqs.iter().zip(&trace.psd) {
        let line = psd_model(fit.omega_m, fit.gamma_m, fit.amplitude, *f);
        csv_line(&mut s, &[*f, *p, 10.0 * fit.model_mw(*f).log10(), 10.0 * line.log10()]);
    }
    s
}

/// Ramp observations with the fitted thermal curve.
pub fn fig_temperature_ramp(points: &[(f64, f64)], g0: f64, omega_m: f64) -> String {
    let mut s = String::from("temp_k,g0_sqrt_n_hz,model_hz\n");
    for (t, y) in points {
        csv_line(&mut s, &[*t, *y, g0 * thermal_occupation(*t, omega_m).sqrt()]);
    }
    s
}

pub fn fig_coupling_sweep(points: &[CouplingPoint]) -> String {
    let mut s = String::from("flux_point_phi0,g0_mean_hz,g0_std_hz,g0_predicted_hz,gamma_m_hz\n");
    for p in points {
        csv_line(
            &mut s,
            &[
                p.flux_point.unwrap_or(f64::NAN),
                p.g0_mean,
                p.g0_std,
                p.g0_predicted.unwrap_or(f64::NAN),
                p.gamma_m_mean,
            ],
        );
    }
    s
}

/// Photon number at which the optimal red detuning cools by `factor`.
pub fn photons_for_cooling(cav: &CavityParams, mech: &MechanicalParams, g0: f64, temp: f64, factor: f64) -> f64 {
    let d = optimal_cooling_detuning(cav, mech);
    let per_photon = backaction(cav, mech, &DriveConfig { detuning: d, n_photons: 1.0, g0 }, temp);
    let n_th = thermal_occupation(temp, mech.omega_m);
    // n_final = (gamma_m n_th + n A+) / (gamma_m + n (A- - A+)) = n_th / factor
    let target = n_th / factor;
    let num = mech.gamma_m * n_th - target * mech.gamma_m;
    let den = target * per_photon.gamma_opt - per_photon.a_plus;
    num / den
}

fn detuning_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Model occupation, damping and spring shift against detuning.
pub fn fig_backaction_model(cav: &CavityParams, mech: &MechanicalParams, n_photons: f64, g0: f64, temp: f64) -> String {
    let k = cav.kappa();
    sweep_to_csv(&detuning_sweep(cav, mech, n_photons, g0, temp, &detuning_grid(-3.0 * k, 3.0 * k, 601)))
}

/// Binned phonon numbers, linewidths and shifts with the fitted model.
pub fn fig_backaction_bins(a: &BackactionAnalysis, mech: &MechanicalParams) -> String {
    let mut s = String::from(
        "detuning_hz,detuning_err_hz,n_phonons,n_phonons_err,gamma_eff_hz,gamma_eff_err_hz,omega_shift_hz,omega_shift_err_hz,n_traces\n",
    );
    let g0 = a.fit.g0;
    for b in &a.bins {
        let y = b.g0_sqrt_n();
        let n = y * y / (g0 * g0);
        csv_line(
            &mut s,
            &[
                b.detuning_mean,
                b.detuning_std,
                n,
                2.0 * n * b.y_error / y,
                b.fit.gamma_m,
                b.fit.gamma_m_err,
                b.fit.omega_m - mech.omega_m,
                b.fit.omega_m_err,
                b.n_traces as f64,
            ],
        );
    }
    s
}

/// Fitted model with the instability intervals marked.
pub fn fig_backaction_fit(a: &BackactionAnalysis, cav: &CavityParams, mech: &MechanicalParams, temp: f64) -> String {
    let mut s = String::from("detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,unstable\n");
    let k = cav.kappa();
    let lo = a.bins.iter().map(|b| b.detuning_mean).fold(f64::INFINITY, f64::min).min(-k) - k;
    let hi = a.bins.iter().map(|b| b.detuning_mean).fold(f64::NEG_INFINITY, f64::max).max(k) + k;
    for d in detuning_grid(lo, hi, 601) {
        let drive = DriveConfig { detuning: d + a.fit.freq_offset, n_photons: a.fit.n_photons, g0: a.fit.g0 };
        let r = backaction(cav, mech, &drive, temp);
        let unstable = a.fit.instability.iter().any(|(l, h)| d >= *l && d <= *h) || !r.stable;
        csv_line(
            &mut s,
            &[d, r.n_final.unwrap_or(f64::NAN), r.gamma_eff, r.omega_shift, if unstable { 1.0 } else { 0.0 }],
        );
    }
    s
}

fn flux_rows(cav: &CavityParams, mech: &MechanicalParams, poly: &KappaPolynomial, n: usize) -> Vec<[f64; 4]> {
    let half = (0.5 - EDGE_MARGIN) * cav.flux_period * (1.0 - 1e-9);
    (0..n)
        .filter_map(|i| {
            let phi = half * i as f64 / (n - 1) as f64;
            let p = FluxPoint(phi);
            let f = flux_map(cav, p).ok()?;
            let g0 = coupling_g0(cav, mech, p).ok()?;
            let kappa = poly.evaluate(f).ok()?;
            Some([phi, f, kappa, g0])
        })
        .collect()
}

/// Cavity and mechanical linewidths across the tuning range.
pub fn fig_linewidths(cav: &CavityParams, mech: &MechanicalParams, poly: &KappaPolynomial, n: usize) -> String {
    let mut s = String::from("phi_phi0,f_cavity_hz,kappa_hz,gamma_m_hz\n");
    for [phi, f, kappa, _] in flux_rows(cav, mech, poly, n) {
        csv_line(&mut s, &[phi, f, kappa, mech.gamma_m]);
    }
    s
}

/// Coupling and single-photon cooperativity across the tuning range.
pub fn fig_cooperativity(cav: &CavityParams, mech: &MechanicalParams, poly: &KappaPolynomial, n: usize) -> String {
    let mut s = String::from("phi_phi0,f_cavity_hz,g0_hz,cooperativity\n");
    for [phi, f, kappa, g0] in flux_rows(cav, mech, poly, n) {
        csv_line(&mut s, &[phi, f, g0, cooperativity(g0, kappa, mech.gamma_m)]);
    }
    s
}

/// Run every analysis the dataset supports, writing `results.json` and the
/// figure CSVs into `out_dir`.
pub fn run_pipeline(root: &Path, out_dir: &Path) -> Result<PipelineResults> {
    run_pipeline_with(Config::load(&root.join("paper.cfg"))?, root, out_dir)
}

/// As `run_pipeline` with an explicit config in place of `root/paper.cfg`.
pub fn run_pipeline_with(cfg: Config, root: &Path, out_dir: &Path) -> Result<PipelineResults> {
    let (cav, mech) = (cfg.cavity(), cfg.mechanics());
    fs::create_dir_all(out_dir)?;
    let mut figures: Vec<(String, String)> = Vec::new();
    let mut emit = |id: &str, body: String| -> Result<()> {
        let name = format!("fig{id}.csv");
        fs::write(out_dir.join(&name), body)?;
        figures.push((id.to_string(), name));
        Ok(())
    };

    let weak_photons = photons_for_cooling(&cav, &mech, WEAK_G0, cfg.temperature, WEAK_COOLING_FACTOR);
    let derived = DerivedSection {
        thermal_occupation: thermal_occupation(cfg.temperature, mech.omega_m),
        min_phonon_bad_cavity: min_phonon_bad_cavity(&cav, &mech),
        optimal_cooling_detuning_hz: optimal_cooling_detuning(&cav, &mech),
        weak_coupling_photons: weak_photons,
    };

    let s21_path = root.join("s21.csv");
    let s21 = if s21_path.exists() {
        let trace = read_complex_trace(&s21_path)?;
        let fit = circle_fit(&trace)?;
        emit("1e", fig_cavity_response(&trace, &fit))?;
        emit("S2", fig_complex_plane(&trace, &fit))?;
        Some(S21Section {
            notch: fit.notch,
            environment: fit.env,
            q_internal: q_internal(&fit.notch, QiConvention::DiameterCorrection)?,
            q_internal_simple: q_internal(&fit.notch, QiConvention::SimpleReciprocal)?,
            q_coupling_real: q_coupling_real(&fit.notch),
            report: fit.report,
        })
    } else {
        None
    };

    emit("1f", fig_flux_map(&cav, &mech, 401))?;

    let ramp_path = root.join("temp_ramp.csv");
    let temperature_ramp = if ramp_path.exists() {
        let points = ramp_points_from_csv(&fs::read_to_string(&ramp_path)?)?;
        let (g0, report) = temperature_ramp_fit(&points, mech.omega_m)?;
        emit("2a", fig_temperature_ramp(&points, g0, mech.omega_m))?;
        Some(RampSection { g0_hz: g0, g0_err_hz: report.stderr[0], n_points: points.len(), report })
    } else {
        None
    };

    let coupling_dir = root.join("coupling");
    let coupling_sweep = if coupling_dir.is_dir() {
        let mut dirs: Vec<_> = fs::read_dir(&coupling_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let runs = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
        if let Some(run) = runs.first() {
            let trace = &run.traces[0];
            if let Ok((fit, _)) = fit_spectrum(trace, None) {
                emit("1g", fig_spectrum(trace, &fit))?;
            }
        }
        let (points, logs) =
            coupling_sweep_analysis(&runs, &cav, &mech, cfg.temperature, &RejectionPolicy::coupling_sweep())?;
        emit("2b", fig_coupling_sweep(&points))?;
        Some(CouplingSection { points, runs: logs })
    } else {
        None
    };

    emit("3b", fig_backaction_model(&cav, &mech, weak_photons, WEAK_G0, cfg.temperature))?;

    let ba_dir = root.join("backaction");
    let backaction = if ba_dir.is_dir() {
        let run = read_run(&ba_dir)?;
        let analysis = analyze_backaction_run(&run, &cav, &mech, DEFAULT_BIN_WIDTH, &RejectionPolicy::backaction())?;
        emit("3c", fig_backaction_model(&cav, &mech, analysis.fit.n_photons, analysis.fit.g0, run.meta.temperature))?;
        emit("4a", fig_backaction_bins(&analysis, &mech))?;
        emit("4b", fig_backaction_fit(&analysis, &cav, &mech, run.meta.temperature))?;
        let f = &analysis.fit;
        Some(BackactionSection {
            n_photons: f.n_photons,
            n_photons_err: f.report.stderr[0],
            g0_hz: f.g0,
            g0_err_hz: f.report.stderr[1],
            freq_offset_hz: f.freq_offset,
            freq_offset_err_hz: f.report.stderr[2],
            cooperativity: cooperativity(f.g0, cav.kappa(), mech.gamma_m),
            instability_hz: f.instability.clone(),
            analysis,
        })
    } else {
        None
    };

    let f_low = flux_map(&cav, FluxPoint((0.5 - EDGE_MARGIN) * cav.flux_period * (1.0 - 1e-9)))?;
    let poly = KappaPolynomial::constant(cav.kappa(), f_low, cav.omega_max);
    emit("S6", fig_linewidths(&cav, &mech, &poly, 201))?;
    emit("S7", fig_cooperativity(&cav, &mech, &poly, 201))?;

    let results = PipelineResults {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        derived,
        s21,
        temperature_ramp,
        coupling_sweep,
        backaction,
        figures,
    };
    let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(out_dir.join("results.json"), json + "\n")?;
    Ok(results)
}
