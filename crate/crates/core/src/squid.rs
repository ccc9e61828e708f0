//! Flux-tunable cavity and the magneto-mechanical coupling chain.
//!
//! The cavity frequency follows `omega_max * sqrt(|cos(pi * phi / period)|)`,
//! the usual single-SQUID dependence. The coupling is the slope of that map
//! times the flux a zero-point displacement of the cantilever threads through
//! the loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phys::{HBAR, TWO_PI};

/// Distance (in flux periods) kept away from the half-period singularity.
pub const EDGE_MARGIN: f64 = 0.02;

/// Flux-tunable cavity. Frequencies and linewidths in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub omega_max: f64,
    #[serde(default = "unit_period")]
    pub flux_period: f64,
    pub kappa_c: f64,
    pub kappa_i: f64,
    #[serde(default)]
    pub phi_mismatch: f64,
}

fn unit_period() -> f64 {
    1.0
}

impl CavityParams {
    pub fn new(omega_max: f64, kappa_c: f64, kappa_i: f64) -> Result<Self> {
        let cav = Self {
            omega_max,
            flux_period: 1.0,
            kappa_c,
            kappa_i,
            phi_mismatch: 0.0,
        };
        cav.validate()?;
        Ok(cav)
    }

    /// Total linewidth `kappa_c + kappa_i`.
    pub fn kappa(&self) -> f64 {
        self.kappa_c + self.kappa_i
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_max > 0.0) {
            return Err(Error::invalid("omega_max must be positive"));
        }
        if !(self.flux_period > 0.0) {
            return Err(Error::invalid("flux_period must be positive"));
        }
        if !(self.kappa_c >= 0.0 && self.kappa_i >= 0.0 && self.kappa() > 0.0) {
            return Err(Error::invalid("linewidths must be non-negative with positive sum"));
        }
        Ok(())
    }

    /// Same cavity with a different flux-map maximum, e.g. the value measured at
    /// another fridge temperature.
    pub fn with_omega_max(self, omega_max: f64) -> Self {
        Self { omega_max, ..self }
    }
}

/// Cantilever description. Frequencies in Hz, mass in kg, length in m,
/// `flux_per_zpm` in flux quanta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalParams {
    pub omega_m: f64,
    pub gamma_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_eff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_zpm: Option<f64>,
    pub flux_per_zpm: f64,
}

impl MechanicalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_m > 0.0 && self.gamma_m > 0.0) {
            return Err(Error::invalid("omega_m and gamma_m must be positive"));
        }
        if !(self.flux_per_zpm >= 0.0) {
            return Err(Error::invalid("flux_per_zpm must be non-negative"));
        }
        if let (Some(m), Some(x)) = (self.mass_eff, self.x_zpm) {
            let expected = zero_point_motion(m, self.omega_m)?;
            if ((x - expected) / expected).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "x_zpm {x:e} m inconsistent with mass_eff (expected {expected:e} m)"
                )));
            }
        }
        Ok(())
    }
}

/// External flux bias in flux quanta.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FluxPoint(pub f64);

impl FluxPoint {
    /// Position reduced into `[-period/2, period/2)`.
    pub fn wrapped(self, period: f64) -> f64 {
        (self.0 / period + 0.5).rem_euclid(1.0) * period - 0.5 * period
    }
}

fn reduced_phase(cav: &CavityParams, p: FluxPoint) -> Result<f64> {
    let w = p.wrapped(cav.flux_period);
    let limit = (0.5 - EDGE_MARGIN) * cav.flux_period;
    if !w.is_finite() || w.abs() >= limit {
        return Err(Error::domain(format!(
            "flux point {} outside validity window |phi| < {limit}",
            p.0
        )));
    }
    Ok(std::f64::consts::PI * w / cav.flux_period)
}

/// Cavity frequency (Hz) at flux bias `p`.
pub fn flux_map(cav: &CavityParams, p: FluxPoint) -> Result<f64> {
    let x = reduced_phase(cav, p)?;
    Ok(cav.omega_max * x.cos().sqrt())
}

/// Slope of the flux map, Hz per flux quantum. Negative for `phi > 0`.
pub fn flux_sensitivity(cav: &CavityParams, p: FluxPoint) -> Result<f64> {
    let x = reduced_phase(cav, p)?;
    let k = std::f64::consts::PI / cav.flux_period;
    Ok(-cav.omega_max * k * x.sin() / (2.0 * x.cos().sqrt()))
}

/// Single-photon coupling `|d omega_c / d phi| * flux_per_zpm` in Hz.
pub fn coupling_g0(cav: &CavityParams, mech: &MechanicalParams, p: FluxPoint) -> Result<f64> {
    if !(mech.flux_per_zpm > 0.0) {
        return Err(Error::invalid("flux_per_zpm must be positive"));
    }
    Ok(flux_sensitivity(cav, p)?.abs() * mech.flux_per_zpm)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn upper_flank(cav: &CavityParams) -> f64 {
    (0.5 - EDGE_MARGIN) * cav.flux_period * (1.0 - 1e-12)
}

/// Positive flux point at which the cavity sits at `freq` (Hz).
pub fn flux_for_frequency(cav: &CavityParams, freq: f64) -> Result<FluxPoint> {
    let hi = upper_flank(cav);
    let f_hi = flux_map(cav, FluxPoint(hi))?;
    if !(freq <= cav.omega_max && freq >= f_hi) {
        return Err(Error::domain(format!(
            "frequency {freq} Hz not reachable inside the validity window"
        )));
    }
    let phi = bisect(0.0, hi, |x| flux_map(cav, FluxPoint(x)).unwrap() - freq);
    Ok(FluxPoint(phi))
}

/// Positive flux point with `|flux_sensitivity| = slope` (Hz per flux quantum).
pub fn flux_for_sensitivity(cav: &CavityParams, slope: f64) -> Result<FluxPoint> {
    let hi = upper_flank(cav);
    let s_hi = flux_sensitivity(cav, FluxPoint(hi))?.abs();
    if !(slope >= 0.0 && slope <= s_hi) {
        return Err(Error::domain(format!(
            "sensitivity {slope} Hz/flux quantum not reachable inside the validity window"
        )));
    }
    let phi = bisect(0.0, hi, |x| flux_sensitivity(cav, FluxPoint(x)).unwrap().abs() - slope);
    Ok(FluxPoint(phi))
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive, got {v}")))
    }
}

/// Zero-point motion `sqrt(hbar / (2 m omega))` in metres; angular frequency
/// built from `omega_m` here.
pub fn zero_point_motion(mass_eff: f64, omega_m: f64) -> Result<f64> {
    require_positive("mass", mass_eff)?;
    require_positive("frequency", omega_m)?;
    Ok((HBAR / (2.0 * mass_eff * TWO_PI * omega_m)).sqrt())
}

/// Effective mass `k / (2 pi f)^2` from a spring constant (N/m).
pub fn mass_from_spring(force_constant: f64, freq: f64) -> Result<f64> {
    require_positive("force constant", force_constant)?;
    require_positive("frequency", freq)?;
    Ok(force_constant / (TWO_PI * freq).powi(2))
}

/// Mean intracavity photon number for a drive of `p_input_watts` at the
/// sample, `detuning` from resonance, pump at `pump_freq`.
///
/// Input-output relation `n = P kappa_c / (hbar w_p ((kappa/2)^2 + Delta^2))`
/// with every rate converted to rad/s here; the Hz factors do not cancel.
pub fn intracavity_photons(cav: &CavityParams, p_input_watts: f64, detuning: f64, pump_freq: f64) -> f64 {
    let kappa_c = TWO_PI * cav.kappa_c;
    let half_kappa = TWO_PI * cav.kappa() / 2.0;
    let delta = TWO_PI * detuning;
    let w_p = TWO_PI * pump_freq;
    p_input_watts * kappa_c / (HBAR * w_p * (half_kappa * half_kappa + delta * delta))
}

pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    1e-3 * 10f64.powf(p_dbm / 10.0)
}

pub fn watts_to_dbm(p_watts: f64) -> f64 {
    10.0 * (p_watts / 1e-3).log10()
}
