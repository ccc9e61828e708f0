//! Linearized dynamical backaction: thermal occupation, sideband scattering
//! rates, optical damping and spring, final occupation and cooperativity.
//!
//! Detuning is `pump - cavity`; negative detuning is red and cools.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phys::{HBAR, KB, TWO_PI};
use crate::squid::{CavityParams, MechanicalParams};

/// Bose occupation of a mode at `omega_m` (Hz) and temperature `temp` (K),
/// with photon energy `hbar * 2 pi * omega_m`.
pub fn thermal_occupation(temp: f64, omega_m: f64) -> f64 {
    if temp <= 0.0 {
        return 0.0;
    }
    let x = HBAR * TWO_PI * omega_m / (KB * temp);
    1.0 / x.exp_m1()
}

/// Pump detuning from the cavity, photon number and bare coupling (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    pub detuning: f64,
    pub n_photons: f64,
    pub g0: f64,
}

/// Anti-Stokes and Stokes scattering rates `(A-, A+)` in Hz.
///
/// `A-+ = g0^2 n kappa / ((kappa/2)^2 + (Delta +- omega_m)^2)`. Written in
/// cyclic units: the 2 pi factors of numerator and denominator cancel.
pub fn scattering_rates(cav: &CavityParams, mech: &MechanicalParams, drive: &DriveConfig) -> (f64, f64) {
    rates(cav.kappa(), mech.omega_m, drive)
}

fn rates(kappa: f64, omega_m: f64, drive: &DriveConfig) -> (f64, f64) {
    let hk2 = (kappa / 2.0).powi(2);
    let pre = drive.g0 * drive.g0 * drive.n_photons * kappa;
    let a_minus = pre / (hk2 + (drive.detuning + omega_m).powi(2));
    let a_plus = pre / (hk2 + (drive.detuning - omega_m).powi(2));
    (a_minus, a_plus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackactionResult {
    pub a_minus: f64,
    pub a_plus: f64,
    /// Optical damping `A- - A+` (Hz).
    pub gamma_opt: f64,
    /// `gamma_m + gamma_opt`.
    pub gamma_eff: f64,
    /// Optical spring shift (Hz).
    pub omega_shift: f64,
    /// Steady-state occupation; `None` when the mode is unstable.
    pub n_final: Option<f64>,
    pub stable: bool,
}

pub fn backaction(cav: &CavityParams, mech: &MechanicalParams, drive: &DriveConfig, temp: f64) -> BackactionResult {
    let n_th = thermal_occupation(temp, mech.omega_m);
    backaction_with_occupation(cav.kappa(), mech.omega_m, mech.gamma_m, drive, n_th)
}

pub(crate) fn backaction_with_occupation(
    kappa: f64,
    omega_m: f64,
    gamma_m: f64,
    drive: &DriveConfig,
    n_th: f64,
) -> BackactionResult {
    let (a_minus, a_plus) = rates(kappa, omega_m, drive);
    let gamma_opt = a_minus - a_plus;
    let gamma_eff = gamma_m + gamma_opt;
    let hk2 = (kappa / 2.0).powi(2);
    let up = drive.detuning + omega_m;
    let down = drive.detuning - omega_m;
    let omega_shift = drive.g0 * drive.g0 * drive.n_photons * (up / (hk2 + up * up) + down / (hk2 + down * down));
    let stable = gamma_eff > 0.0;
    // ratio form keeps n_final == n_th exactly when the drive is off
    let n_final = stable.then(|| gamma_m / gamma_eff * n_th + a_plus / gamma_eff);
    BackactionResult {
        a_minus,
        a_plus,
        gamma_opt,
        gamma_eff,
        omega_shift,
        n_final,
        stable,
    }
}

/// Evaluate `backaction` over a list of detunings.
pub fn detuning_sweep(
    cav: &CavityParams,
    mech: &MechanicalParams,
    n_photons: f64,
    g0: f64,
    temp: f64,
    detunings: &[f64],
) -> Vec<(f64, BackactionResult)> {
    detunings
        .iter()
        .map(|&d| {
            let drive = DriveConfig { detuning: d, n_photons, g0 };
            (d, backaction(cav, mech, &drive, temp))
        })
        .collect()
}

/// Detuning in `[-3 kappa, 0]` with the largest optical damping per photon.
pub fn optimal_cooling_detuning(cav: &CavityParams, mech: &MechanicalParams) -> f64 {
    let kappa = cav.kappa();
    let drive = |d: f64| DriveConfig { detuning: d, n_photons: 1.0, g0: 1.0 };
    let damping = |d: f64| {
        let (m, p) = rates(kappa, mech.omega_m, &drive(d));
        m - p
    };
    // coarse scan, then golden section around the best sample
    let lo = -3.0 * kappa.max(mech.omega_m);
    let n = 600;
    let step = -lo / n as f64;
    let best = (0..=n)
        .map(|i| lo + step * i as f64)
        .max_by(|a, b| damping(*a).total_cmp(&damping(*b)))
        .unwrap_or(-mech.omega_m);
    let (mut a, mut b) = (best - step, (best + step).min(0.0));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if damping(c) > damping(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Cooling floor `(kappa / 4 omega_m)^2` in the unresolved-sideband regime.
pub fn min_phonon_bad_cavity(cav: &CavityParams, mech: &MechanicalParams) -> f64 {
    min_phonon_for(cav.kappa(), mech.omega_m)
}

pub fn min_phonon_for(kappa: f64, omega_m: f64) -> f64 {
    (kappa / (4.0 * omega_m)).powi(2)
}

/// Single-photon cooperativity `4 g0^2 / (kappa gamma_m)`.
pub fn cooperativity(g0: f64, kappa: f64, gamma_m: f64) -> f64 {
    4.0 * g0 * g0 / (kappa * gamma_m)
}

/// Polynomial model of cavity linewidth against cavity frequency, valid on
/// the frequency range it was fitted over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaPolynomial {
    /// Coefficients in the normalized variable `(f - center) / half_width`,
    /// lowest order first.
    pub coeffs: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
}

impl KappaPolynomial {
    pub fn constant(kappa: f64, f_min: f64, f_max: f64) -> Self {
        Self {
            coeffs: vec![kappa],
            f_min,
            f_max,
        }
    }

    fn normalized(&self, f: f64) -> f64 {
        let center = 0.5 * (self.f_min + self.f_max);
        let half = 0.5 * (self.f_max - self.f_min);
        if half > 0.0 {
            (f - center) / half
        } else {
            0.0
        }
    }

    /// Least-squares polynomial of the given degree through `(freq, kappa)`.
    pub fn fit(freqs: &[f64], kappas: &[f64], degree: usize) -> Result<Self> {
        if freqs.len() != kappas.len() || freqs.len() < degree + 1 {
            return Err(Error::invalid("need at least degree + 1 (frequency, linewidth) pairs"));
        }
        let f_min = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
        let f_max = freqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut poly = Self {
            coeffs: vec![0.0; degree + 1],
            f_min,
            f_max,
        };
        let a = DMatrix::from_fn(freqs.len(), degree + 1, |i, j| poly.normalized(freqs[i]).powi(j as i32));
        let b = DVector::from_column_slice(kappas);
        let svd = a.svd(true, true);
        let sol = svd.solve(&b, 1e-14).map_err(|e| Error::fit(e.to_string()))?;
        poly.coeffs = sol.iter().copied().collect();
        Ok(poly)
    }

    pub fn evaluate(&self, f_cavity: f64) -> Result<f64> {
        let tol = 1e-9 * (self.f_max - self.f_min).abs().max(1.0);
        if !(f_cavity >= self.f_min - tol && f_cavity <= self.f_max + tol) {
            return Err(Error::domain(format!(
                "cavity frequency {f_cavity} Hz outside fitted range [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        let x = self.normalized(f_cavity);
        Ok(self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c))
    }
}

pub fn kappa_vs_fluxpoint(poly: &KappaPolynomial, f_cavity: f64) -> Result<f64> {
    poly.evaluate(f_cavity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const OMEGA_M: f64 = 274_383.13;

    fn cav(kappa: f64) -> CavityParams {
        CavityParams::new(8.1676e9, kappa / 2.0, kappa / 2.0).unwrap()
    }

    fn mech() -> MechanicalParams {
        MechanicalParams {
            omega_m: OMEGA_M,
            gamma_m: 0.3,
            mass_eff: None,
            x_zpm: None,
            flux_per_zpm: 1.6e-6,
        }
    }

    #[test]
    fn thermal_examples() {
        let n = thermal_occupation(0.1, 274_383.0);
        assert!((n - 7592.0).abs() < 5.0, "{n}");
        assert_eq!(thermal_occupation(0.0, 274_383.0), 0.0);
        let hot = thermal_occupation(0.7, 274_383.0);
        assert!((hot / n / 7.0 - 1.0).abs() < 0.005);
    }

    #[test]
    fn rates_examples() {
        let c = cav(2.8e6);
        let m = mech();
        let d0 = DriveConfig { detuning: 0.0, n_photons: 1.0, g0: 100.0 };
        let (am, ap) = scattering_rates(&c, &m, &d0);
        assert_eq!(am, ap);

        let resolved = cav(0.01 * OMEGA_M);
        let d = DriveConfig { detuning: -OMEGA_M, n_photons: 3.0, g0: 50.0 };
        let (am, ap) = scattering_rates(&resolved, &m, &d);
        let k = resolved.kappa();
        assert!((am / (4.0 * 50.0 * 50.0 * 3.0 / k) - 1.0).abs() < 1e-12);
        assert!(ap / am < 1e-4);

        let d = DriveConfig { detuning: -1.4e6, n_photons: 0.9, g0: 2460.0 };
        let (am, ap) = scattering_rates(&c, &m, &d);
        assert!((am - ap - 1.5).abs() < 0.05, "{}", am - ap);
    }

    #[test]
    fn undriven_and_symmetry() {
        let c = cav(2.8e6);
        let m = mech();
        let n_th = thermal_occupation(0.1, OMEGA_M);
        let r = backaction(&c, &m, &DriveConfig { detuning: -1e6, n_photons: 0.0, g0: 2460.0 }, 0.1);
        assert_eq!(r.gamma_opt, 0.0);
        assert_eq!(r.omega_shift, 0.0);
        assert_eq!(r.n_final, Some(n_th));
        let r = backaction(&c, &m, &DriveConfig { detuning: 0.0, n_photons: 1.0, g0: 2460.0 }, 0.1);
        assert_eq!(r.gamma_opt, 0.0);
    }

    #[test]
    fn blue_side_instability() {
        let c = cav(2.8e6);
        let m = mech();
        let r = backaction(&c, &m, &DriveConfig { detuning: 1.0e6, n_photons: 0.9, g0: 2460.0 }, 0.1);
        assert!(r.a_plus - r.a_minus > m.gamma_m);
        assert!(!r.stable);
        assert!(r.n_final.is_none());
    }

    #[test]
    fn cooling_floor() {
        let v = min_phonon_bad_cavity(&cav(2.8e6), &mech());
        assert!((v - 6.5).abs() < 0.1, "{v}");
        assert!((min_phonon_for(4.0 * OMEGA_M, OMEGA_M) - 1.0).abs() < 1e-15);
        assert_eq!(min_phonon_for(0.0, OMEGA_M), 0.0);
    }

    #[test]
    fn cooperativity_examples() {
        assert!((cooperativity(2460.0, 2.8e6, 0.3) - 28.8).abs() < 0.1);
        assert!((cooperativity(3000.0, 10e6, 0.3) - 12.0).abs() < 1e-9);
        let a = cooperativity(100.0, 1e6, 0.3);
        assert!((cooperativity(200.0, 1e6, 0.3) / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_polynomial() {
        let p = KappaPolynomial::constant(2.8e6, 7.8e9, 8.2e9);
        assert_eq!(p.evaluate(8.0e9).unwrap(), 2.8e6);
        assert!(matches!(p.evaluate(8.3e9), Err(Error::Domain(_))));

        let f = [7.85e9, 7.95e9, 8.05e9, 8.15e9];
        let k = [10e6, 6e6, 4e6, 3e6];
        let poly = KappaPolynomial::fit(&f, &k, 3).unwrap();
        for (fi, ki) in f.iter().zip(k) {
            assert!((poly.evaluate(*fi).unwrap() - ki).abs() < 1e-9 * ki);
        }
        assert!(kappa_vs_fluxpoint(&poly, 7.0e9).is_err());
    }

    #[test]
    fn resolved_sideband_floor() {
        let k = 0.01 * OMEGA_M;
        let c = cav(k);
        let m = mech();
        let r = backaction(&c, &m, &DriveConfig { detuning: -OMEGA_M, n_photons: 1e12, g0: 100.0 }, 0.1);
        let quantum = r.a_plus / (r.a_minus - r.a_plus);
        assert!((r.n_final.unwrap() / quantum - 1.0).abs() < 1e-3);
        assert!((quantum / min_phonon_for(k, OMEGA_M) - 1.0).abs() < 0.01);
    }

    #[test]
    fn optimal_detuning_bad_cavity() {
        let c = cav(2.8e6);
        let d = optimal_cooling_detuning(&c, &mech());
        // bad-cavity optimum sits near -kappa / (2 sqrt 3)
        assert!((d / (-2.8e6 / (2.0 * 3f64.sqrt())) - 1.0).abs() < 0.1, "{d}");
    }

    proptest! {
        #[test]
        fn damping_is_odd(
            kappa in 1e4f64..1e7, delta in -1e7f64..1e7, n in 0.0f64..100.0, g0 in 0.0f64..1e4,
        ) {
            let c = cav(kappa);
            let m = mech();
            let a = backaction(&c, &m, &DriveConfig { detuning: delta, n_photons: n, g0 }, 0.1);
            let b = backaction(&c, &m, &DriveConfig { detuning: -delta, n_photons: n, g0 }, 0.1);
            prop_assert!((a.gamma_opt + b.gamma_opt).abs() <= 1e-12 * a.gamma_opt.abs().max(1e-300));
        }

        #[test]
        fn bookkeeping(
            kappa in 1e4f64..1e7, delta in -1e7f64..1e7, n in 0.0f64..100.0,
            g0 in 0.0f64..1e4, temp in 0.0f64..1.0,
        ) {
            let c = cav(kappa);
            let m = mech();
            let r = backaction(&c, &m, &DriveConfig { detuning: delta, n_photons: n, g0 }, temp);
            prop_assert_eq!(r.gamma_eff, m.gamma_m + r.gamma_opt);
            prop_assert_eq!(r.stable, r.gamma_eff > 0.0);
            if let Some(nf) = r.n_final {
                let lhs = m.gamma_m * thermal_occupation(temp, OMEGA_M) + r.a_plus;
                let rhs = r.gamma_eff * nf;
                prop_assert!(((lhs - rhs) / lhs.max(1e-300)).abs() < 1e-12);
            }
        }

        #[test]
        fn cooling_minimum_bad_cavity(ratio in 5.0f64..20.0, g0 in 20.0f64..200.0) {
            let kappa = ratio * OMEGA_M;
            let c = cav(kappa);
            let m = mech();
            let detunings: Vec<f64> = (0..=2000).map(|i| -2.0 * kappa * (1.0 - i as f64 / 2000.0)).collect();
            let sweep = detuning_sweep(&c, &m, 10.0, g0, 0.1, &detunings);
            let (best, _) = sweep
                .iter()
                .filter_map(|(d, r)| r.n_final.map(|n| (*d, n)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            prop_assert!(best >= -kappa && best <= -OMEGA_M / 2.0, "{}", best);
        }
    }
}
