//! File formats: complex and power traces as CSV, flat key-value configs and
//! sidecars, and detuning-sweep tables.
//!
//! A trace may also travel as a single text stream: `# key = value` metadata
//! lines followed by the CSV body. This is what the command-line tools pipe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optomech::BackactionResult;
use crate::resonator::ComplexTrace;
use crate::spectra::{CalibrationTone, SpectrumTrace};
use crate::squid::{CavityParams, MechanicalParams};

fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Split a stream into `# key = value` metadata and the CSV body.
pub fn split_metadata(text: &str) -> (BTreeMap<String, String>, String) {
    let mut meta = BTreeMap::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().trim_matches('"').to_string());
            }
        } else if !line.trim().is_empty() {
            body.push_str(line);
            body.push('\n');
        }
    }
    (meta, body)
}

fn parse_rows<const N: usize>(body: &str, header: [&str; N]) -> Result<Vec<[f64; N]>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let found: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if found != header {
        return Err(Error::Parse(format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != N {
            return Err(Error::Parse(format!("row {}: expected {N} fields", i + 1)));
        }
        let mut row = [0.0; N];
        for (j, field) in rec.iter().enumerate() {
            row[j] = field
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad number {field:?}", i + 1)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// ComplexTrace as `freq_hz,re,im` with 17 significant digits.
pub fn complex_trace_to_csv(trace: &ComplexTrace) -> String {
    let mut s = String::from("freq_hz,re,im\n");
    for (f, z) in trace.freqs.iter().zip(&trace.values) {
        let _ = writeln!(s, "{},{},{}", fmt_num(*f), fmt_num(z.re), fmt_num(z.im));
    }
    s
}

pub fn complex_trace_from_csv(text: &str) -> Result<ComplexTrace> {
    let (_, body) = split_metadata(text);
    let rows = parse_rows(&body, ["freq_hz", "re", "im"])?;
    ComplexTrace::new(
        rows.iter().map(|r| r[0]).collect(),
        rows.iter().map(|r| Complex64::new(r[1], r[2])).collect(),
    )
}

pub fn write_complex_trace(path: &Path, trace: &ComplexTrace) -> Result<()> {
    fs::write(path, complex_trace_to_csv(trace))?;
    Ok(())
}

pub fn read_complex_trace(path: &Path) -> Result<ComplexTrace> {
    complex_trace_from_csv(&fs::read_to_string(path)?)
}

/// Instrument metadata that accompanies a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumMeta {
    pub enbw_hz: f64,
    pub n_averages: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_f_mod_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_f_dev_hz: Option<f64>,
}

impl SpectrumMeta {
    pub fn of(trace: &SpectrumTrace) -> Self {
        Self {
            enbw_hz: trace.enbw,
            n_averages: trace.n_averages,
            cal_f_mod_hz: trace.calibration.map(|c| c.f_mod),
            cal_f_dev_hz: trace.calibration.map(|c| c.f_dev),
        }
    }

    fn calibration(&self) -> Result<Option<CalibrationTone>> {
        match (self.cal_f_mod_hz, self.cal_f_dev_hz) {
            (Some(m), Some(d)) => Ok(Some(CalibrationTone::new(m, d))),
            (None, None) => Ok(None),
            _ => Err(Error::Parse("cal_f_mod_hz and cal_f_dev_hz must be given together".into())),
        }
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<Option<f64>> {
            map.get(k)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value for {k}: {v:?}"))))
                .transpose()
        };
        Ok(Self {
            enbw_hz: num("enbw_hz")?.ok_or_else(|| Error::Parse("missing enbw_hz".into()))?,
            n_averages: num("n_averages")?.map(|v| v as u32).unwrap_or(1),
            cal_f_mod_hz: num("cal_f_mod_hz")?,
            cal_f_dev_hz: num("cal_f_dev_hz")?,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "enbw_hz = {}", self.enbw_hz);
        let _ = writeln!(s, "n_averages = {}", self.n_averages);
        if let (Some(m), Some(d)) = (self.cal_f_mod_hz, self.cal_f_dev_hz) {
            let _ = writeln!(s, "cal_f_mod_hz = {m}");
            let _ = writeln!(s, "cal_f_dev_hz = {d}");
        }
        s
    }
}

/// Spectrum as `freq_hz,psd_dbm` without metadata.
pub fn spectrum_to_csv(trace: &SpectrumTrace) -> String {
    let mut s = String::from("freq_hz,psd_dbm\n");
    for (f, p) in trace.freqs.iter().zip(&trace.psd) {
        let _ = writeln!(s, "{},{}", fmt_num(*f), fmt_num(*p));
    }
    s
}

/// Spectrum with its metadata inlined as `#` lines.
pub fn spectrum_to_stream(trace: &SpectrumTrace) -> String {
    let mut s = String::new();
    for line in SpectrumMeta::of(trace).to_toml().lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(&spectrum_to_csv(trace));
    s
}

fn assemble_spectrum(body: &str, meta: SpectrumMeta) -> Result<SpectrumTrace> {
    let rows = parse_rows(body, ["freq_hz", "psd_dbm"])?;
    let trace = SpectrumTrace {
        freqs: rows.iter().map(|r| r[0]).collect(),
        psd: rows.iter().map(|r| r[1]).collect(),
        enbw: meta.enbw_hz,
        n_averages: meta.n_averages,
        calibration: meta.calibration()?,
    };
    trace.validate()?;
    Ok(trace)
}

/// Parse a spectrum stream carrying inline metadata.
pub fn spectrum_from_stream(text: &str) -> Result<SpectrumTrace> {
    let (map, body) = split_metadata(text);
    assemble_spectrum(&body, SpectrumMeta::from_map(&map)?)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Write `path` (CSV) and its `.meta` sidecar.
pub fn write_spectrum(path: &Path, trace: &SpectrumTrace) -> Result<()> {
    fs::write(path, spectrum_to_csv(trace))?;
    fs::write(sidecar_path(path), SpectrumMeta::of(trace).to_toml())?;
    Ok(())
}

/// Read a spectrum CSV; metadata comes from inline `#` lines if present,
/// otherwise from the sidecar.
pub fn read_spectrum(path: &Path) -> Result<SpectrumTrace> {
    let text = fs::read_to_string(path)?;
    let (map, body) = split_metadata(&text);
    let meta = if map.contains_key("enbw_hz") {
        SpectrumMeta::from_map(&map)?
    } else {
        let side = sidecar_path(path);
        let raw = fs::read_to_string(&side)
            .map_err(|e| Error::Io(format!("{}: {e}", side.display())))?;
        toml::from_str(&raw)?
    };
    assemble_spectrum(&body, meta)
}

/// Detuning-sweep table. Unstable rows leave `n_final` empty.
pub fn sweep_to_csv(rows: &[(f64, BackactionResult)]) -> String {
    let mut s = String::from("detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,stable\n");
    for (d, r) in rows {
        let n = r.n_final.map(fmt_num).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_num(*d),
            n,
            fmt_num(r.gamma_eff),
            fmt_num(r.omega_shift),
            r.stable
        );
    }
    s
}

/// Temperature-ramp observations as `temp_k,g0_sqrt_n_hz`.
pub fn ramp_points_to_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("temp_k,g0_sqrt_n_hz\n");
    for (t, y) in points {
        let _ = writeln!(s, "{t},{y}");
    }
    s
}

pub fn ramp_points_from_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let (_, body) = split_metadata(text);
    Ok(parse_rows(&body, ["temp_k", "g0_sqrt_n_hz"])?.into_iter().map(|r| (r[0], r[1])).collect())
}

/// Flat key-value configuration holding cavity, cantilever and experiment
/// settings. Keys match the struct field names; SI units, frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub omega_max: f64,
    #[serde(default = "one")]
    pub flux_period: f64,
    pub kappa_c: f64,
    pub kappa_i: f64,
    #[serde(default)]
    pub phi_mismatch: f64,
    pub omega_m: f64,
    pub gamma_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_eff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_zpm: Option<f64>,
    pub flux_per_zpm: f64,
    /// Fridge temperature (K).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Input-line attenuation (dB).
    #[serde(default)]
    pub attenuation_db: f64,
    /// Calibration-tone frequency deviation (Hz).
    #[serde(default = "default_cal_dev")]
    pub cal_f_dev: f64,
    /// Calibration-tone offset above the mechanical line (Hz).
    #[serde(default = "default_cal_offset")]
    pub cal_offset: f64,
}

fn one() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    0.1
}
fn default_cal_dev() -> f64 {
    2000.0
}
fn default_cal_offset() -> f64 {
    crate::spectra::DEFAULT_CAL_OFFSET
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.cavity().validate()?;
        cfg.mechanics().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn cavity(&self) -> CavityParams {
        CavityParams {
            omega_max: self.omega_max,
            flux_period: self.flux_period,
            kappa_c: self.kappa_c,
            kappa_i: self.kappa_i,
            phi_mismatch: self.phi_mismatch,
        }
    }

    pub fn mechanics(&self) -> MechanicalParams {
        MechanicalParams {
            omega_m: self.omega_m,
            gamma_m: self.gamma_m,
            mass_eff: self.mass_eff,
            x_zpm: self.x_zpm,
            flux_per_zpm: self.flux_per_zpm,
        }
    }

    /// Values quoted for the device studied here.
    pub fn reference() -> Self {
        Self {
            omega_max: 8.1676e9,
            flux_period: 1.0,
            kappa_c: 1.4e6,
            kappa_i: 1.4e6,
            phi_mismatch: 0.0,
            omega_m: 274_383.13,
            gamma_m: 0.3,
            mass_eff: None,
            x_zpm: None,
            flux_per_zpm: 1.60e-6,
            temperature: 0.1,
            attenuation_db: 63.0,
            cal_f_dev: 2000.0,
            cal_offset: crate::spectra::DEFAULT_CAL_OFFSET,
        }
    }
}
