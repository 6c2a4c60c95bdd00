//! Orchestration around `meds-core`: artifact files, configuration, the
//! three-phase pipeline driver, sweeps, and reporting. The `meds` binary is
//! a thin argument parser over this crate.

pub mod config;
pub mod files;
pub mod infer;
pub mod pipeline;
pub mod report;
pub mod sweep;
