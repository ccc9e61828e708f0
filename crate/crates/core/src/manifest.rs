//! Run directories: `meta.toml` (flat keys of `RunMeta`) plus numbered
//! `trace_NNN.csv` spectra with `.meta` sidecars and, for tracked runs,
//! `vna_NNN.csv` sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{read_complex_trace, read_spectrum, sidecar_path, write_complex_trace, SpectrumMeta};
use crate::pipeline::{MeasurementRun, RunMeta};

pub const META_FILE: &str = "meta.toml";

fn numbered(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.strip_prefix(prefix).is_some_and(|n| n.chars().all(|c| c.is_ascii_digit())))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_run(dir: &Path) -> Result<MeasurementRun> {
    let meta_path = dir.join(META_FILE);
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|e| Error::Io(format!("{}: {e}", meta_path.display())))?;
    let meta: RunMeta = toml::from_str(&meta_text)?;
    let traces = numbered(dir, "trace_")?
        .iter()
        .map(|p| read_spectrum(p))
        .collect::<Result<Vec<_>>>()?;
    let vna_paths = numbered(dir, "vna_")?;
    let vna_traces = if vna_paths.is_empty() {
        None
    } else {
        Some(vna_paths.iter().map(|p| read_complex_trace(p)).collect::<Result<Vec<_>>>()?)
    };
    let run = MeasurementRun { traces, vna_traces, meta };
    run.validate()?;
    Ok(run)
}

/// Write a run; spectra use shortest round-trip number formatting.
pub fn write_run(dir: &Path, run: &MeasurementRun) -> Result<()> {
    run.validate()?;
    fs::create_dir_all(dir)?;
    let meta = toml::to_string(&run.meta).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta)?;
    for (i, t) in run.traces.iter().enumerate() {
        let path = dir.join(format!("trace_{i:03}.csv"));
        let mut body = String::from("freq_hz,psd_dbm\n");
        for (f, p) in t.freqs.iter().zip(&t.psd) {
            body.push_str(&format!("{f},{p}\n"));
        }
        fs::write(&path, body)?;
        fs::write(sidecar_path(&path), SpectrumMeta::of(t).to_toml())?;
    }
    if let Some(vnas) = &run.vna_traces {
        for (i, v) in vnas.iter().enumerate() {
            write_complex_trace(&dir.join(format!("vna_{i:03}.csv")), v)?;
        }
    }
    Ok(())
}
