//! File formats, run configuration and command implementations around
//! `busseg-core`: PPM/PGM benchmark archives, textual checkpoints, JSON/CSV
//! reports, SVG training curves, and the `generate`, `train`, `eval` and
//! `ablate` commands of the `busseg` binary.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;
pub mod pnm;
pub mod report;

pub use busseg_core as core;
