//! Synthetic measurement runs with known generator parameters.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optomech::{backaction, thermal_occupation, DriveConfig};
use crate::pipeline::{MeasurementRun, RunMeta};
use crate::resonator::{linear_grid, synthesize_s21, EnvironmentParams, NotchParams};
use crate::spectra::{
    dbm_to_mw, synthesize_spectrum, CalibrationTone, MechSpectrumFit, SpectrumSynthesis, SpectrumTrace,
};
use crate::squid::{coupling_g0, CavityParams, FluxPoint, MechanicalParams};

/// Analyzer settings and signal levels for synthetic spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSetup {
    pub span: f64,
    pub n_points: usize,
    /// Averages per stored trace.
    pub n_averages: u32,
    pub floor_dbm: f64,
    /// Peak of the undriven thermal line; fixes the transduction.
    pub thermal_peak_dbm: f64,
    /// Level of the calibration tone; fixes the modulation depth.
    pub cal_peak_dbm: f64,
    /// Tone position above the bare mechanical frequency (Hz).
    pub cal_offset: f64,
    pub noisy: bool,
    /// Round stored dBm values to this many decimals (compact files).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_decimals: Option<i32>,
}

impl SpectrumSetup {
    /// 60 Hz span at 0.2 Hz resolution with the tone 25 Hz above the line.
    pub fn compact() -> Self {
        Self {
            span: 60.0,
            n_points: 301,
            n_averages: 10,
            floor_dbm: -140.0,
            thermal_peak_dbm: -105.0,
            cal_peak_dbm: -115.0,
            cal_offset: 25.0,
            noisy: true,
            round_decimals: None,
        }
    }

    fn step(&self) -> f64 {
        self.span / (self.n_points - 1) as f64
    }

    /// Transduction giving `thermal_peak_dbm` for an undriven line.
    pub fn transduction(&self, g0_sqrt_nth: f64, gamma_m: f64) -> f64 {
        let peak = dbm_to_mw(self.thermal_peak_dbm);
        // peak = 8 T (g0 sqrt n)^2 / gamma_m
        peak * gamma_m / (8.0 * g0_sqrt_nth * g0_sqrt_nth)
    }

    /// Calibration tone reaching `cal_peak_dbm` for transduction `t`.
    pub fn calibration(&self, omega_m: f64, t: f64) -> CalibrationTone {
        let enbw = self.step();
        let f_dev = (2.0 * dbm_to_mw(self.cal_peak_dbm) * enbw / t).sqrt();
        CalibrationTone::detuned_from(omega_m, self.cal_offset, f_dev)
    }

    fn synthesis(&self, center: f64) -> SpectrumSynthesis {
        SpectrumSynthesis {
            center: Some(center),
            span: self.span,
            n_points: self.n_points,
            enbw: None,
            n_averages: self.n_averages,
            noisy: self.noisy,
        }
    }

    fn finish(&self, mut t: SpectrumTrace) -> SpectrumTrace {
        if let Some(d) = self.round_decimals {
            let q = 10f64.powi(d);
            for p in t.psd.iter_mut() {
                *p = (*p * q).round() / q;
            }
            for f in t.freqs.iter_mut() {
                *f = (*f * 1e6).round() / 1e6;
            }
        }
        t
    }
}

/// `(temperature, g0 sqrt(n_th))` points with relative Gaussian noise.
pub fn synthesize_ramp(g0: f64, omega_m: f64, temps: &[f64], rel_noise: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    temps
        .iter()
        .map(|&t| {
            let y = g0 * thermal_occupation(t, omega_m).sqrt();
            (t, y * (1.0 + rel_noise * normal.sample(&mut rng)))
        })
        .collect()
}

/// Evenly spaced temperatures.
pub fn temperature_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Undriven run at a flux bias: `n_traces` thermal spectra at `temp`.
pub fn synthesize_coupling_run(
    cav: &CavityParams,
    mech: &MechanicalParams,
    flux_point: f64,
    temp: f64,
    n_traces: usize,
    setup: &SpectrumSetup,
    seed: u64,
) -> Result<MeasurementRun> {
    let g0 = coupling_g0(cav, mech, FluxPoint(flux_point))?;
    let g = g0 * thermal_occupation(temp, mech.omega_m).sqrt();
    let t = setup.transduction(g, mech.gamma_m);
    let cal = setup.calibration(mech.omega_m, t);
    let line = MechSpectrumFit::for_coupling(mech.omega_m, mech.gamma_m, t, setup.floor_dbm, g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = (0..n_traces)
        .map(|_| {
            let s = rng.random::<u64>();
            synthesize_spectrum(&line, &cal, &setup.synthesis(mech.omega_m), s).map(|t| setup.finish(t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementRun {
        traces,
        vna_traces: None,
        meta: RunMeta {
            label: format!("g0_{:.0}Hz", g0),
            temperature: temp,
            input_power_dbm: None,
            flux_point: Some(flux_point),
            pump_freq: None,
        },
    })
}

/// VNA sweep settings for cavity tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnaSetup {
    pub span: f64,
    pub n_points: usize,
    /// Complex noise per quadrature.
    pub sigma: f64,
    /// Magnitude of the pump leakage and the spur 6 MHz below it.
    pub leakage: f64,
}

impl VnaSetup {
    pub fn compact() -> Self {
        Self {
            span: 16e6,
            n_points: 161,
            sigma: 0.005,
            leakage: 3.0,
        }
    }
}

/// Driven sweep: generator parameters of the backaction model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackactionGenerator {
    pub n_photons: f64,
    pub g0: f64,
    pub temp: f64,
    pub pump_freq: f64,
    /// Shift between the nominal and the effective detuning (Hz).
    pub freq_offset: f64,
}

/// One spectrum plus VNA sweep per requested detuning (pump minus cavity).
/// Detunings where the model is unstable produce no trace.
pub fn synthesize_backaction_run(
    cav: &CavityParams,
    mech: &MechanicalParams,
    gen: &BackactionGenerator,
    detunings: &[f64],
    setup: &SpectrumSetup,
    vna: &VnaSetup,
    seed: u64,
) -> Result<MeasurementRun> {
    let n_th = thermal_occupation(gen.temp, mech.omega_m);
    let t = setup.transduction(gen.g0 * n_th.sqrt(), mech.gamma_m);
    let cal = setup.calibration(mech.omega_m, t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::new();
    let mut vnas = Vec::new();
    for &d in detunings {
        let drive = DriveConfig { detuning: d + gen.freq_offset, n_photons: gen.n_photons, g0: gen.g0 };
        let ba = backaction(cav, mech, &drive, gen.temp);
        let Some(n_final) = ba.n_final else { continue };
        let line = MechSpectrumFit::for_coupling(
            mech.omega_m + ba.omega_shift,
            ba.gamma_eff,
            t,
            setup.floor_dbm,
            gen.g0 * n_final.sqrt(),
        );
        let s_seed = rng.random::<u64>();
        let v_seed = rng.random::<u64>();
        traces.push(setup.finish(synthesize_spectrum(&line, &cal, &setup.synthesis(mech.omega_m), s_seed)?));
        vnas.push(synthesize_tracking_sweep(cav, gen.pump_freq - d, gen.pump_freq, vna, v_seed)?);
    }
    if traces.is_empty() {
        return Err(Error::invalid("every requested detuning is unstable"));
    }
    Ok(MeasurementRun {
        traces,
        vna_traces: Some(vnas),
        meta: RunMeta {
            label: "backaction".into(),
            temperature: gen.temp,
            input_power_dbm: None,
            flux_point: None,
            pump_freq: Some(gen.pump_freq),
        },
    })
}

/// Notch response of the cavity at `f_cavity` seen with the pump on: the
/// sweep is centred on the cavity (to 0.5 MHz) and the pump and its spur
/// leak into nearby points.
pub fn synthesize_tracking_sweep(
    cav: &CavityParams,
    f_cavity: f64,
    pump_freq: f64,
    vna: &VnaSetup,
    seed: u64,
) -> Result<crate::resonator::ComplexTrace> {
    let center = (f_cavity / 0.5e6).round() * 0.5e6;
    let freqs = linear_grid(center, vna.span, vna.n_points);
    let np = NotchParams {
        q_loaded: f_cavity / cav.kappa(),
        q_coupling_abs: f_cavity / cav.kappa_c,
        phi0: cav.phi_mismatch,
        f_res: f_cavity,
    };
    let mut trace = synthesize_s21(&np, &EnvironmentParams::IDENTITY, &freqs, vna.sigma, seed)?;
    for (f, z) in trace.freqs.iter().zip(trace.values.iter_mut()) {
        if (f - pump_freq).abs() < 0.3e6 || (f - (pump_freq - 6e6)).abs() < 0.2e6 {
            *z += Complex64::new(vna.leakage, 0.0);
        }
    }
    Ok(trace)
}

/// Detunings spread uniformly inside each bin `[k w, (k+1) w)` for `k` in
/// `k_lo..k_hi`, `per_bin` per bin; with `centered` every point sits at the
/// bin centre.
pub fn binned_detunings(k_lo: i64, k_hi: i64, width: f64, per_bin: usize, centered: bool, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in k_lo..k_hi {
        for _ in 0..per_bin {
            let u: f64 = if centered { 0.5 } else { rng.random_range(0.05..0.95) };
            out.push((k as f64 + u) * width);
        }
    }
    out
}
