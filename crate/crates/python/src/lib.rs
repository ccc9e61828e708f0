//! Python bindings for `magmech`.
//!
//! Structured results (fits, reports, pipeline output) are returned as plain
//! Python dicts built from their JSON form.

use std::path::Path;

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use magmech::io::Config;
use magmech::optomech::{self, DriveConfig};
use magmech::pipeline::{analyze_backaction_run, RejectionPolicy};
use magmech::resonator::{self, ComplexTrace, EnvironmentParams, NotchParams};
use magmech::spectra::{self, CalibrationTone, MechSpectrumFit, SpectrumSynthesis};
use magmech::squid::{self, CavityParams, FluxPoint, MechanicalParams};
use magmech::Error;

create_exception!(pymagmech, FitError, PyRuntimeError, "A fit failed or a trace was rejected.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::FitFailure(_) | Error::Calibration(_) => FitError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Flux-tunable cavity (frequencies in Hz, flux in flux quanta).
#[pyclass(name = "Cavity", module = "pymagmech", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCavity {
    inner: CavityParams,
}

#[pymethods]
impl PyCavity {
    #[new]
    #[pyo3(signature = (omega_max, kappa_c, kappa_i, flux_period = 1.0, phi_mismatch = 0.0))]
    fn new(omega_max: f64, kappa_c: f64, kappa_i: f64, flux_period: f64, phi_mismatch: f64) -> PyResult<Self> {
        let inner = CavityParams { omega_max, flux_period, kappa_c, kappa_i, phi_mismatch };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn omega_max(&self) -> f64 {
        self.inner.omega_max
    }

    #[getter]
    fn kappa_c(&self) -> f64 {
        self.inner.kappa_c
    }

    #[getter]
    fn kappa_i(&self) -> f64 {
        self.inner.kappa_i
    }

    /// Total linewidth.
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    /// Cavity frequency at flux `phi`.
    fn frequency(&self, phi: f64) -> PyResult<f64> {
        squid::flux_map(&self.inner, FluxPoint(phi)).map_err(py_err)
    }

    /// d(frequency)/d(flux) at `phi` (Hz per flux quantum).
    fn sensitivity(&self, phi: f64) -> PyResult<f64> {
        squid::flux_sensitivity(&self.inner, FluxPoint(phi)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Cavity(omega_max={}, kappa_c={}, kappa_i={})",
            self.inner.omega_max, self.inner.kappa_c, self.inner.kappa_i
        )
    }
}

/// Mechanical mode and its flux coupling.
#[pyclass(name = "Mechanics", module = "pymagmech", skip_from_py_object)]
#[derive(Clone)]
pub struct PyMechanics {
    inner: MechanicalParams,
}

#[pymethods]
impl PyMechanics {
    #[new]
    #[pyo3(signature = (omega_m, gamma_m, flux_per_zpm))]
    fn new(omega_m: f64, gamma_m: f64, flux_per_zpm: f64) -> PyResult<Self> {
        let inner = MechanicalParams { omega_m, gamma_m, mass_eff: None, x_zpm: None, flux_per_zpm };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn omega_m(&self) -> f64 {
        self.inner.omega_m
    }

    #[getter]
    fn gamma_m(&self) -> f64 {
        self.inner.gamma_m
    }

    #[getter]
    fn flux_per_zpm(&self) -> f64 {
        self.inner.flux_per_zpm
    }

    fn __repr__(&self) -> String {
        format!(
            "Mechanics(omega_m={}, gamma_m={}, flux_per_zpm={})",
            self.inner.omega_m, self.inner.gamma_m, self.inner.flux_per_zpm
        )
    }
}

/// Analyzer power spectrum (dBm per bin) with optional calibration tone.
#[pyclass(name = "SpectrumTrace", module = "pymagmech", skip_from_py_object)]
#[derive(Clone)]
pub struct PySpectrumTrace {
    inner: spectra::SpectrumTrace,
}

#[pymethods]
impl PySpectrumTrace {
    #[new]
    #[pyo3(signature = (freqs, psd_dbm, enbw, n_averages = 1, cal_f_mod = None, cal_f_dev = None))]
    fn new(
        freqs: Vec<f64>,
        psd_dbm: Vec<f64>,
        enbw: f64,
        n_averages: u32,
        cal_f_mod: Option<f64>,
        cal_f_dev: Option<f64>,
    ) -> PyResult<Self> {
        let calibration = match (cal_f_mod, cal_f_dev) {
            (Some(m), Some(d)) => Some(CalibrationTone::new(m, d)),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("give both cal_f_mod and cal_f_dev or neither")),
        };
        let inner = spectra::SpectrumTrace { freqs, psd: psd_dbm, enbw, n_averages, calibration };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn freqs(&self) -> Vec<f64> {
        self.inner.freqs.clone()
    }

    #[getter]
    fn psd_dbm(&self) -> Vec<f64> {
        self.inner.psd.clone()
    }

    #[getter]
    fn enbw(&self) -> f64 {
        self.inner.enbw
    }

    #[getter]
    fn n_averages(&self) -> u32 {
        self.inner.n_averages
    }

    fn __len__(&self) -> usize {
        self.inner.freqs.len()
    }
}

/// Cavity and mechanics from a config file, or the built-in reference values.
#[pyfunction]
#[pyo3(signature = (path = None))]
fn load_config(path: Option<&str>) -> PyResult<(PyCavity, PyMechanics, f64)> {
    let cfg = match path {
        Some(p) => Config::load(Path::new(p)).map_err(py_err)?,
        None => Config::reference(),
    };
    Ok((PyCavity { inner: cfg.cavity() }, PyMechanics { inner: cfg.mechanics() }, cfg.temperature))
}

#[pyfunction]
fn thermal_occupation(temp: f64, omega_m: f64) -> f64 {
    optomech::thermal_occupation(temp, omega_m)
}

#[pyfunction]
fn cooperativity(g0: f64, kappa: f64, gamma_m: f64) -> f64 {
    optomech::cooperativity(g0, kappa, gamma_m)
}

#[pyfunction]
fn min_phonon_bad_cavity(kappa: f64, omega_m: f64) -> f64 {
    optomech::min_phonon_for(kappa, omega_m)
}

#[pyfunction]
fn optimal_cooling_detuning(cavity: &PyCavity, mechanics: &PyMechanics) -> f64 {
    optomech::optimal_cooling_detuning(&cavity.inner, &mechanics.inner)
}

/// Single-photon coupling at flux `phi` (Hz).
#[pyfunction]
fn coupling_g0(cavity: &PyCavity, mechanics: &PyMechanics, phi: f64) -> PyResult<f64> {
    squid::coupling_g0(&cavity.inner, &mechanics.inner, FluxPoint(phi)).map_err(py_err)
}

/// Rates, damping, spring shift and final occupation for one drive.
#[pyfunction]
fn backaction<'py>(
    py: Python<'py>,
    cavity: &PyCavity,
    mechanics: &PyMechanics,
    detuning: f64,
    n_photons: f64,
    g0: f64,
    temp: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = optomech::backaction(&cavity.inner, &mechanics.inner, &DriveConfig { detuning, n_photons, g0 }, temp);
    to_py(py, &r)
}

/// Notch transmission with environment; returns `(freqs, values)`.
#[pyfunction]
#[pyo3(signature = (
    f_res = 8.1672e9, q_loaded = 2913.0, q_coupling = 5758.0, phi0 = 0.23,
    amp = 0.32, alpha = -0.56, tau = 69.8e-9, span = 30e6, points = 2001, sigma = 0.0, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn simulate_s21(
    f_res: f64,
    q_loaded: f64,
    q_coupling: f64,
    phi0: f64,
    amp: f64,
    alpha: f64,
    tau: f64,
    span: f64,
    points: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<Complex64>)> {
    let np = NotchParams { q_loaded, q_coupling_abs: q_coupling, phi0, f_res };
    let env = EnvironmentParams { amp, alpha, tau };
    let t = resonator::synthesize_s21(&np, &env, &resonator::linear_grid(f_res, span, points), sigma, seed)
        .map_err(py_err)?;
    Ok((t.freqs, t.values))
}

/// Circle fit of a complex transmission sweep.
#[pyfunction]
fn circle_fit<'py>(py: Python<'py>, freqs: Vec<f64>, values: Vec<Complex64>) -> PyResult<Bound<'py, PyAny>> {
    let trace = ComplexTrace::new(freqs, values).map_err(py_err)?;
    to_py(py, &resonator::circle_fit(&trace).map_err(py_err)?)
}

/// Thermal-line spectrum with a calibration tone, transduction chosen so the
/// line peaks at `peak_dbm`.
#[pyfunction]
#[pyo3(signature = (
    g0, n_phonons, gamma_m = 0.3, omega_m = 274_383.13, f_dev = 2000.0, cal_offset = 215.0,
    floor_dbm = -140.0, peak_dbm = -105.0, n_averages = 10, noisy = true, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn simulate_spectrum(
    g0: f64,
    n_phonons: f64,
    gamma_m: f64,
    omega_m: f64,
    f_dev: f64,
    cal_offset: f64,
    floor_dbm: f64,
    peak_dbm: f64,
    n_averages: u32,
    noisy: bool,
    seed: u64,
) -> PyResult<PySpectrumTrace> {
    if !(g0 > 0.0 && n_phonons > 0.0 && gamma_m > 0.0) {
        return Err(PyValueError::new_err("g0, n_phonons and gamma_m must be positive"));
    }
    let g = g0 * n_phonons.sqrt();
    let t = spectra::dbm_to_mw(peak_dbm) * gamma_m / (8.0 * g * g);
    let line = MechSpectrumFit::for_coupling(omega_m, gamma_m, t, floor_dbm, g);
    let cal = CalibrationTone::detuned_from(omega_m, cal_offset, f_dev);
    let synth = SpectrumSynthesis { n_averages, noisy, ..SpectrumSynthesis::analyzer_default() };
    let inner = spectra::synthesize_spectrum(&line, &cal, &synth, seed).map_err(py_err)?;
    Ok(PySpectrumTrace { inner })
}

/// Line-shape fit; returns `{"fit": ..., "report": ...}`.
#[pyfunction]
fn fit_spectrum<'py>(py: Python<'py>, trace: &PySpectrumTrace) -> PyResult<Bound<'py, PyAny>> {
    let (fit, report) = spectra::fit_spectrum(&trace.inner, None).map_err(py_err)?;
    #[derive(Serialize)]
    struct Out {
        fit: MechSpectrumFit,
        report: magmech::FitReport,
    }
    to_py(py, &Out { fit, report })
}

/// Calibrated coupling `(g0, stderr)` in Hz from a trace with a calibration tone.
#[pyfunction]
fn extract_g0(trace: &PySpectrumTrace, n_phonons: f64) -> PyResult<(f64, f64)> {
    let cal = trace
        .inner
        .calibration
        .ok_or_else(|| FitError::new_err("trace carries no calibration tone"))?;
    let (fit, _) = spectra::fit_spectrum(&trace.inner, None).map_err(py_err)?;
    let est = spectra::extract_g0(&trace.inner, &fit, &cal, n_phonons).map_err(py_err)?;
    Ok((est.value, est.stderr))
}

/// Fit `g0` to `(temperature, g0 sqrt(n))` points; returns `(g0, stderr)`.
#[pyfunction]
fn temperature_ramp_fit(temps: Vec<f64>, values: Vec<f64>, omega_m: f64) -> PyResult<(f64, f64)> {
    if temps.len() != values.len() {
        return Err(PyValueError::new_err("temps and values differ in length"));
    }
    let points: Vec<(f64, f64)> = temps.into_iter().zip(values).collect();
    let (g0, report) = magmech::pipeline::temperature_ramp_fit(&points, omega_m).map_err(py_err)?;
    Ok((g0, report.stderr[0]))
}

/// Backaction analysis of a tracked run directory.
#[pyfunction]
#[pyo3(signature = (run_dir, config = None, bin_width = 1e6))]
fn fit_backaction<'py>(
    py: Python<'py>,
    run_dir: &str,
    config: Option<&str>,
    bin_width: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(p) => Config::load(Path::new(p)).map_err(py_err)?,
        None => Config::reference(),
    };
    let run = magmech::manifest::read_run(Path::new(run_dir)).map_err(py_err)?;
    let a = analyze_backaction_run(&run, &cfg.cavity(), &cfg.mechanics(), bin_width, &RejectionPolicy::backaction())
        .map_err(py_err)?;
    to_py(py, &a)
}

/// Analyze a dataset directory; writes `results.json` and figure tables to
/// `out_dir` and returns the results.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, root: &str, out_dir: &str) -> PyResult<Bound<'py, PyAny>> {
    let r = magmech::report::run_pipeline(Path::new(root), Path::new(out_dir)).map_err(py_err)?;
    to_py(py, &r)
}

#[pymodule]
fn pymagmech(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FitError", m.py().get_type::<FitError>())?;
    m.add_class::<PyCavity>()?;
    m.add_class::<PyMechanics>()?;
    m.add_class::<PySpectrumTrace>()?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(thermal_occupation, m)?)?;
    m.add_function(wrap_pyfunction!(cooperativity, m)?)?;
    m.add_function(wrap_pyfunction!(min_phonon_bad_cavity, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_cooling_detuning, m)?)?;
    m.add_function(wrap_pyfunction!(coupling_g0, m)?)?;
    m.add_function(wrap_pyfunction!(backaction, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_s21, m)?)?;
    m.add_function(wrap_pyfunction!(circle_fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(fit_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(extract_g0, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_ramp_fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_backaction, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
