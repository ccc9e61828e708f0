//! Regenerate the synthetic datasets under `fixtures/`.
//!
//! `cargo run -p magmech --example make_fixtures -- <fixtures-dir>`

use std::fs;
use std::path::PathBuf;

use magmech::io::{ramp_points_to_csv, write_complex_trace, Config};
use magmech::manifest::write_run;
use magmech::resonator::{linear_grid, synthesize_s21, EnvironmentParams, NotchParams};
use magmech::squid::flux_for_sensitivity;
use magmech::synthetic::*;

fn main() -> magmech::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let cfg = Config::load(&root.join("paper.cfg"))?;
    let (cav, mech) = (cfg.cavity(), cfg.mechanics());

    let np = NotchParams { q_loaded: 2913.0, q_coupling_abs: 5758.0, phi0: 0.23, f_res: 8.1672e9 };
    let env = EnvironmentParams { amp: 0.32, alpha: -0.56, tau: 69.8e-9 };
    let s21 = synthesize_s21(&np, &env, &linear_grid(np.f_res, 30e6, 801), 0.002, 11)?;
    write_complex_trace(&root.join("s21.csv"), &s21)?;

    let temps = temperature_grid(0.08, 0.7, 12);
    let ramp = synthesize_ramp(48.0, mech.omega_m, &temps, 0.02, 12);
    fs::write(root.join("temp_ramp.csv"), ramp_points_to_csv(&ramp))?;

    let setup = SpectrumSetup { round_decimals: Some(4), ..SpectrumSetup::compact() };
    let coupling = root.join("coupling");
    if coupling.exists() {
        fs::remove_dir_all(&coupling)?;
    }
    for (i, g0) in [48.0, 500.0, 2460.0].into_iter().enumerate() {
        let phi = flux_for_sensitivity(&cav, g0 / mech.flux_per_zpm)?.0;
        let run = synthesize_coupling_run(&cav, &mech, phi, cfg.temperature, 40, &setup, 100 + i as u64)?;
        write_run(&coupling.join(format!("run_{i}")), &run)?;
    }

    let gen = BackactionGenerator {
        n_photons: 0.9,
        g0: 2460.0,
        temp: cfg.temperature,
        pump_freq: 8.1526e9,
        freq_offset: 0.0,
    };
    let detunings = binned_detunings(-7, 7, 1e6, 5, false, 13);
    let run = synthesize_backaction_run(&cav, &mech, &gen, &detunings, &setup, &VnaSetup::compact(), 14)?;
    let ba = root.join("backaction");
    if ba.exists() {
        fs::remove_dir_all(&ba)?;
    }
    write_run(&ba, &run)?;
    println!("wrote fixtures to {}", root.display());
    Ok(())
}
