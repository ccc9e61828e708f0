//! Simulation and analysis toolkit for a SQUID-tunable microwave cavity
//! magnetically coupled to a cantilever.
//!
//! Frequencies, linewidths and rates are cyclic (Hz) at every public
//! interface.

pub mod error;
pub mod io;
pub mod manifest;
pub mod phys;
pub mod optomech;
pub mod pipeline;
pub mod report;
pub mod resonator;
pub mod spectra;
pub mod squid;
pub mod synthetic;

pub use error::{Error, Result};
pub use phys::FitReport;
