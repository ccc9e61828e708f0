//! `magmech` command-line interface.
//!
//! Structured results go to `--out` (or standard output when it is absent,
//! so commands can be piped); the human summary goes to standard output, or
//! to standard error when standard output carries the results.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 fit failure or rejection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "magmech", version, about = "Flux-mediated magneto-mechanics: synthesis and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination for structured results.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key-value device config; built-in reference values otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FluxTable {
    /// Cavity frequency, slope and coupling over one period.
    Map,
    /// Cavity and mechanical linewidths.
    Linewidths,
    /// Coupling and single-photon cooperativity.
    Cooperativity,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a notch-type transmission sweep (CSV).
    SimulateS21 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8.1672e9)]
        f_res: f64,
        #[arg(long, default_value_t = 2913.0)]
        q_loaded: f64,
        /// Magnitude of the complex coupling quality factor.
        #[arg(long, default_value_t = 5758.0)]
        q_coupling: f64,
        /// Impedance-mismatch phase (rad).
        #[arg(long, default_value_t = 0.23, allow_hyphen_values = true)]
        phi0: f64,
        #[arg(long, default_value_t = 0.32)]
        amp: f64,
        #[arg(long, default_value_t = -0.56, allow_hyphen_values = true)]
        alpha: f64,
        /// Electrical delay (s).
        #[arg(long, default_value_t = 69.8e-9, allow_hyphen_values = true)]
        tau: f64,
        #[arg(long, default_value_t = 30e6)]
        span: f64,
        #[arg(long, default_value_t = 2001)]
        points: usize,
        /// Complex noise per quadrature.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
    },
    /// Circle-fit a transmission sweep (JSON).
    FitS21 {
        #[command(flatten)]
        common: Common,
        /// Sweep CSV; standard input when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Directory for the response and complex-plane figure tables.
        #[arg(long)]
        figures: Option<PathBuf>,
    },
    /// Synthesize an analyzer spectrum with a calibration tone.
    SimulateSpectrum {
        #[command(flatten)]
        common: Common,
        /// Single-photon coupling (Hz).
        #[arg(long, default_value_t = 48.0)]
        g0: f64,
        /// Mode temperature (K); config temperature when absent.
        #[arg(long)]
        temp: Option<f64>,
        /// Phonon number; thermal occupation at `--temp` when absent.
        #[arg(long)]
        n_phonons: Option<f64>,
        /// Mechanical linewidth (Hz); config value when absent.
        #[arg(long)]
        gamma_m: Option<f64>,
        #[arg(long, default_value_t = -140.0, allow_hyphen_values = true)]
        floor_dbm: f64,
        /// Line peak level (dBm); fixes the transduction.
        #[arg(long, default_value_t = -105.0, allow_hyphen_values = true)]
        peak_dbm: f64,
        #[arg(long, default_value_t = 800.0)]
        span: f64,
        #[arg(long, default_value_t = 8001)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        n_averages: u32,
        /// Store expected bin powers without noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Fit the mechanical line of a spectrum (JSON, embeds the trace).
    FitSpectrum {
        #[command(flatten)]
        common: Common,
        /// Spectrum stream; standard input when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// File for the spectrum figure table.
        #[arg(long)]
        figure: Option<PathBuf>,
    },
    /// Extract g0 from a fitted spectrum or a raw spectrum stream.
    CalibrateG0 {
        #[command(flatten)]
        common: Common,
        /// Output of `fit-spectrum` or a spectrum stream; standard input when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Mode temperature (K); config temperature when absent.
        #[arg(long)]
        temp: Option<f64>,
        /// Phonon number; thermal occupation at `--temp` when absent.
        #[arg(long)]
        n_phonons: Option<f64>,
    },
    /// Tabulate the flux dependence of the device (CSV).
    FluxMap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = FluxTable::Map)]
        table: FluxTable,
        #[arg(long, default_value_t = 401)]
        points: usize,
    },
    /// Model backaction against detuning (CSV), optionally writing a
    /// synthetic tracked run.
    BackactionSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.9)]
        n_photons: f64,
        #[arg(long, default_value_t = 2460.0)]
        g0: f64,
        /// Choose the photon number cooling by this factor at optimal detuning.
        #[arg(long)]
        cooling_factor: Option<f64>,
        #[arg(long)]
        temp: Option<f64>,
        /// Lowest detuning (Hz); -3 kappa when absent.
        #[arg(long, allow_hyphen_values = true)]
        from: Option<f64>,
        /// Highest detuning (Hz); 3 kappa when absent.
        #[arg(long, allow_hyphen_values = true)]
        to: Option<f64>,
        #[arg(long, default_value_t = 601)]
        points: usize,
        /// Write a synthetic tracked run directory here.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8.1526e9)]
        pump_freq: f64,
        #[arg(long, default_value_t = 1e6)]
        bin_width: f64,
        /// Lowest bin index of the synthetic run.
        #[arg(long, default_value_t = -7, allow_hyphen_values = true)]
        bin_min: i64,
        /// One past the highest bin index of the synthetic run.
        #[arg(long, default_value_t = 7, allow_hyphen_values = true)]
        bin_max: i64,
        #[arg(long, default_value_t = 5)]
        per_bin: usize,
    },
    /// Fit the backaction model to a tracked run directory (JSON).
    FitBackaction {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1e6)]
        bin_width: f64,
        /// Directory for the bin, fit and model figure tables.
        #[arg(long)]
        figures: Option<PathBuf>,
    },
    /// Fit g0 to a temperature ramp, synthesizing one when no input is given.
    TempRamp {
        #[command(flatten)]
        common: Common,
        /// `temp_k,g0_sqrt_n_hz` CSV.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 48.0)]
        g0: f64,
        /// Relative Gaussian noise of synthetic points.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0.08)]
        t_min: f64,
        #[arg(long, default_value_t = 0.7)]
        t_max: f64,
        #[arg(long, default_value_t = 12)]
        points: usize,
        /// File for the ramp figure table.
        #[arg(long)]
        figure: Option<PathBuf>,
    },
    /// Analyze a dataset directory, writing results.json and every figure table.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
