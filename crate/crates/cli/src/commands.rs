use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use magmech::io::{
    complex_trace_from_csv, complex_trace_to_csv, ramp_points_from_csv, spectrum_from_stream, spectrum_to_stream,
    sweep_to_csv, Config,
};
use magmech::manifest::{read_run, write_run};
use magmech::optomech::{cooperativity, detuning_sweep, thermal_occupation, KappaPolynomial};
use magmech::pipeline::{analyze_backaction_run, temperature_ramp_fit, RejectionPolicy};
use magmech::report::{
    fig_backaction_bins, fig_backaction_fit, fig_backaction_model, fig_complex_plane, fig_cavity_response,
    fig_cooperativity, fig_flux_map, fig_linewidths, fig_spectrum, fig_temperature_ramp, photons_for_cooling,
    run_pipeline_with, BackactionSection, RampSection, S21Section,
};
use magmech::resonator::{
    circle_fit, linear_grid, q_coupling_real, q_internal, synthesize_s21, EnvironmentParams, NotchParams,
    QiConvention,
};
use magmech::spectra::{
    extract_g0, fit_spectrum, synthesize_spectrum, CalibrationTone, MechSpectrumFit, SpectrumSynthesis,
    SpectrumTrace,
};
use magmech::squid::{flux_map, FluxPoint, EDGE_MARGIN};
use magmech::synthetic::{binned_detunings, synthesize_backaction_run, SpectrumSetup, VnaSetup};
use magmech::{Error, FitReport};

use crate::{Command, Common, FluxTable};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Analysis(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Analysis(Error::FitFailure(_) | Error::Calibration(_)) => 2,
            CliError::Analysis(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Analysis(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Analysis(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Analysis(Error::Io(e.to_string()))
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<Config> {
    match &common.config {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::reference()),
    }
}

fn read_input(path: Option<&Path>) -> CliResult<String> {
    match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())).into()),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

/// Results to `--out` with the summary on stdout, or results on stdout with
/// the summary on stderr.
fn emit(out: Option<&Path>, body: &str, summary: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, body)?;
            println!("{summary}");
        }
        None => {
            std::io::stdout().write_all(body.as_bytes())?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(Error::from)? + "\n")
}

fn write_figure(dir: &Path, id: &str, body: String) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("fig{id}.csv")), body)?;
    Ok(())
}

/// Output of `fit-spectrum`, consumed by `calibrate-g0`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrumFitOutput {
    pub fit: MechSpectrumFit,
    pub report: FitReport,
    pub trace: SpectrumTrace,
}

#[derive(Debug, Serialize)]
struct G0Output {
    g0_hz: f64,
    g0_err_hz: f64,
    n_phonons: f64,
    omega_m_hz: f64,
    gamma_m_hz: f64,
}

#[derive(Debug, Serialize)]
struct RampOutput {
    #[serde(flatten)]
    section: RampSection,
    points: Vec<(f64, f64)>,
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SimulateS21 { common, f_res, q_loaded, q_coupling, phi0, amp, alpha, tau, span, points, sigma } => {
            let np = NotchParams { q_loaded, q_coupling_abs: q_coupling, phi0, f_res };
            let env = EnvironmentParams { amp, alpha, tau };
            if points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let trace = synthesize_s21(&np, &env, &linear_grid(f_res, span, points), sigma, common.seed)?;
            let summary = format!("{points}-point sweep over {:.3} MHz around {f_res} Hz", span / 1e6);
            emit(common.out.as_deref(), &complex_trace_to_csv(&trace), &summary)
        }
        Command::FitS21 { common, input, figures } => {
            let trace = complex_trace_from_csv(&read_input(input.as_deref())?)?;
            let fit = circle_fit(&trace)?;
            if let Some(dir) = &figures {
                write_figure(dir, "1e", fig_cavity_response(&trace, &fit))?;
                write_figure(dir, "S2", fig_complex_plane(&trace, &fit))?;
            }
            let section = S21Section {
                notch: fit.notch,
                environment: fit.env,
                q_internal: q_internal(&fit.notch, QiConvention::DiameterCorrection)?,
                q_internal_simple: q_internal(&fit.notch, QiConvention::SimpleReciprocal)?,
                q_coupling_real: q_coupling_real(&fit.notch),
                report: fit.report,
            };
            let n = &section.notch;
            let summary = format!(
                "f_res = {:.6} GHz, Q_l = {:.1}, |Q_c| = {:.1}, phi0 = {:.4} rad, Q_int = {:.1} (simple reciprocal {:.1})",
                n.f_res / 1e9,
                n.q_loaded,
                n.q_coupling_abs,
                n.phi0,
                section.q_internal,
                section.q_internal_simple
            );
            emit(common.out.as_deref(), &to_json(&section)?, &summary)
        }
        Command::SimulateSpectrum {
            common,
            g0,
            temp,
            n_phonons,
            gamma_m,
            floor_dbm,
            peak_dbm,
            span,
            points,
            n_averages,
            noiseless,
        } => {
            let cfg = load_config(&common)?;
            let temp = temp.unwrap_or(cfg.temperature);
            let n = n_phonons.unwrap_or_else(|| thermal_occupation(temp, cfg.omega_m));
            let gamma_m = gamma_m.unwrap_or(cfg.gamma_m);
            if !(g0 > 0.0 && n > 0.0 && gamma_m > 0.0) {
                return Err(CliError::Usage("--g0, phonon number and --gamma-m must be positive".into()));
            }
            let g = g0 * n.sqrt();
            let setup = SpectrumSetup { thermal_peak_dbm: peak_dbm, floor_dbm, ..SpectrumSetup::compact() };
            let t = setup.transduction(g, gamma_m);
            let line = MechSpectrumFit::for_coupling(cfg.omega_m, gamma_m, t, floor_dbm, g);
            let cal = CalibrationTone::detuned_from(cfg.omega_m, cfg.cal_offset, cfg.cal_f_dev);
            let synth = SpectrumSynthesis {
                span,
                n_points: points,
                n_averages,
                noisy: !noiseless,
                ..SpectrumSynthesis::analyzer_default()
            };
            let trace = synthesize_spectrum(&line, &cal, &synth, common.seed)?;
            let summary = format!("spectrum for g0 = {g0} Hz at n = {n:.1} phonons, {points} bins");
            emit(common.out.as_deref(), &spectrum_to_stream(&trace), &summary)
        }
        Command::FitSpectrum { common, input, figure } => {
            let trace = spectrum_from_stream(&read_input(input.as_deref())?)?;
            let (fit, report) = fit_spectrum(&trace, None)?;
            if let Some(p) = &figure {
                fs::write(p, fig_spectrum(&trace, &fit))?;
            }
            let mut summary = format!(
                "omega_m = {:.3} Hz, gamma_m = {:.3} +/- {:.3} Hz, peak {:.1} dB above floor",
                fit.omega_m,
                fit.gamma_m,
                fit.gamma_m_err,
                fit.peak_above_floor_db()
            );
            if let Some(g) = fit.g0_sqrt_n {
                summary.push_str(&format!(", g0 sqrt(n) = {g:.1} Hz"));
            }
            emit(common.out.as_deref(), &to_json(&SpectrumFitOutput { fit, report, trace })?, &summary)
        }
        Command::CalibrateG0 { common, input, temp, n_phonons } => {
            let cfg = load_config(&common)?;
            let text = read_input(input.as_deref())?;
            let (trace, fit) = if text.trim_start().starts_with('{') {
                let parsed: SpectrumFitOutput = serde_json::from_str(&text).map_err(Error::from)?;
                (parsed.trace, parsed.fit)
            } else {
                let trace = spectrum_from_stream(&text)?;
                let (fit, _) = fit_spectrum(&trace, None)?;
                (trace, fit)
            };
            let cal = trace
                .calibration
                .ok_or_else(|| Error::Calibration("spectrum carries no calibration tone".into()))?;
            let n = n_phonons.unwrap_or_else(|| thermal_occupation(temp.unwrap_or(cfg.temperature), cfg.omega_m));
            let est = extract_g0(&trace, &fit, &cal, n)?;
            let out = G0Output {
                g0_hz: est.value,
                g0_err_hz: est.stderr,
                n_phonons: n,
                omega_m_hz: fit.omega_m,
                gamma_m_hz: fit.gamma_m,
            };
            let summary = format!("g0 = {:.2} +/- {:.2} Hz (n = {n:.1})", est.value, est.stderr);
            emit(common.out.as_deref(), &to_json(&out)?, &summary)
        }
        Command::FluxMap { common, table, points } => {
            let cfg = load_config(&common)?;
            let (cav, mech) = (cfg.cavity(), cfg.mechanics());
            if points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let body = match table {
                FluxTable::Map => fig_flux_map(&cav, &mech, points),
                FluxTable::Linewidths | FluxTable::Cooperativity => {
                    let f_low = flux_map(&cav, FluxPoint((0.5 - EDGE_MARGIN) * cav.flux_period * (1.0 - 1e-9)))?;
                    let poly = KappaPolynomial::constant(cav.kappa(), f_low, cav.omega_max);
                    if matches!(table, FluxTable::Linewidths) {
                        fig_linewidths(&cav, &mech, &poly, points)
                    } else {
                        fig_cooperativity(&cav, &mech, &poly, points)
                    }
                }
            };
            let rows = body.lines().count().saturating_sub(1);
            emit(common.out.as_deref(), &body, &format!("{rows} flux points"))
        }
        Command::BackactionSweep {
            common,
            n_photons,
            g0,
            cooling_factor,
            temp,
            from,
            to,
            points,
            run_dir,
            pump_freq,
            bin_width,
            bin_min,
            bin_max,
            per_bin,
        } => {
            let cfg = load_config(&common)?;
            let (cav, mech) = (cfg.cavity(), cfg.mechanics());
            let temp = temp.unwrap_or(cfg.temperature);
            let n_photons = match cooling_factor {
                Some(f) if f > 1.0 => photons_for_cooling(&cav, &mech, g0, temp, f),
                Some(_) => return Err(CliError::Usage("--cooling-factor must exceed 1".into())),
                None => n_photons,
            };
            if points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let k = cav.kappa();
            let (lo, hi) = (from.unwrap_or(-3.0 * k), to.unwrap_or(3.0 * k));
            let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
            let body = sweep_to_csv(&detuning_sweep(&cav, &mech, n_photons, g0, temp, &grid));
            let mut summary = format!("{points} detunings at n_photons = {n_photons:.4}, g0 = {g0} Hz");
            if let Some(dir) = &run_dir {
                let gen = magmech::synthetic::BackactionGenerator { n_photons, g0, temp, pump_freq, freq_offset: 0.0 };
                let detunings = binned_detunings(bin_min, bin_max, bin_width, per_bin, false, common.seed);
                let setup = SpectrumSetup { round_decimals: Some(4), ..SpectrumSetup::compact() };
                let run = synthesize_backaction_run(
                    &cav,
                    &mech,
                    &gen,
                    &detunings,
                    &setup,
                    &VnaSetup::compact(),
                    common.seed.wrapping_add(1),
                )?;
                write_run(dir, &run)?;
                summary.push_str(&format!("; wrote {} traces to {}", run.traces.len(), dir.display()));
            }
            emit(common.out.as_deref(), &body, &summary)
        }
        Command::FitBackaction { common, input, bin_width, figures } => {
            let cfg = load_config(&common)?;
            let (cav, mech) = (cfg.cavity(), cfg.mechanics());
            let run = read_run(&input)?;
            let analysis = analyze_backaction_run(&run, &cav, &mech, bin_width, &RejectionPolicy::backaction())?;
            let temp = run.meta.temperature;
            if let Some(dir) = &figures {
                let f = &analysis.fit;
                write_figure(dir, "3c", fig_backaction_model(&cav, &mech, f.n_photons, f.g0, temp))?;
                write_figure(dir, "4a", fig_backaction_bins(&analysis, &mech))?;
                write_figure(dir, "4b", fig_backaction_fit(&analysis, &cav, &mech, temp))?;
            }
            let f = &analysis.fit;
            let section = BackactionSection {
                n_photons: f.n_photons,
                n_photons_err: f.report.stderr[0],
                g0_hz: f.g0,
                g0_err_hz: f.report.stderr[1],
                freq_offset_hz: f.freq_offset,
                freq_offset_err_hz: f.report.stderr[2],
                cooperativity: cooperativity(f.g0, cav.kappa(), mech.gamma_m),
                instability_hz: f.instability.clone(),
                analysis: analysis.clone(),
            };
            let unstable: Vec<String> = section
                .instability_hz
                .iter()
                .map(|(a, b)| format!("[{:.2}, {:.2}] MHz", a / 1e6, b / 1e6))
                .collect();
            let summary = format!(
                "n_photons = {:.3} +/- {:.3}, g0 = {:.3} +/- {:.3} kHz, {} bins, unstable: {}",
                section.n_photons,
                section.n_photons_err,
                section.g0_hz / 1e3,
                section.g0_err_hz / 1e3,
                analysis.bins.len(),
                if unstable.is_empty() { "none".into() } else { unstable.join(", ") }
            );
            emit(common.out.as_deref(), &to_json(&section)?, &summary)
        }
        Command::TempRamp { common, input, g0, noise, t_min, t_max, points, figure } => {
            let cfg = load_config(&common)?;
            let pts = match &input {
                Some(p) => ramp_points_from_csv(&read_input(Some(p))?)?,
                None => {
                    if points < 2 {
                        return Err(CliError::Usage("--points must be at least 2".into()));
                    }
                    let temps = magmech::synthetic::temperature_grid(t_min, t_max, points);
                    magmech::synthetic::synthesize_ramp(g0, cfg.omega_m, &temps, noise, common.seed)
                }
            };
            let (fit_g0, report) = temperature_ramp_fit(&pts, cfg.omega_m)?;
            if let Some(p) = &figure {
                fs::write(p, fig_temperature_ramp(&pts, fit_g0, cfg.omega_m))?;
            }
            let section = RampSection { g0_hz: fit_g0, g0_err_hz: report.stderr[0], n_points: pts.len(), report };
            let summary = format!("g0 = {:.2} +/- {:.2} Hz from {} points", fit_g0, section.g0_err_hz, pts.len());
            emit(common.out.as_deref(), &to_json(&RampOutput { section, points: pts })?, &summary)
        }
        Command::RunPipeline { common, input } => {
            let out: PathBuf = common
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("run-pipeline needs --out <directory>".into()))?;
            let cfg = match &common.config {
                Some(p) => Config::load(p)?,
                None => Config::load(&input.join("paper.cfg"))?,
            };
            let r = run_pipeline_with(cfg, &input, &out)?;
            let mut lines = vec![format!("wrote results.json and {} figure tables to {}", r.figures.len(), out.display())];
            if let Some(s) = &r.s21 {
                lines.push(format!("S21: Q_l = {:.1}, Q_int = {:.1}", s.notch.q_loaded, s.q_internal));
            }
            if let Some(s) = &r.temperature_ramp {
                lines.push(format!("ramp: g0 = {:.2} +/- {:.2} Hz", s.g0_hz, s.g0_err_hz));
            }
            if let Some(s) = &r.coupling_sweep {
                for p in &s.points {
                    lines.push(format!("coupling {}: g0 = {:.1} +/- {:.1} Hz", p.label, p.g0_mean, p.g0_std));
                }
            }
            if let Some(s) = &r.backaction {
                lines.push(format!(
                    "backaction: n_photons = {:.3}, g0 = {:.3} kHz",
                    s.n_photons,
                    s.g0_hz / 1e3
                ));
            }
            println!("{}", lines.join("\n"));
            Ok(())
        }
    }
}
