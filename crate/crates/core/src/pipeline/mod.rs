//! File formats, artifacts and the command layer of the re-ranking pipeline.

pub mod artifacts;
pub mod commands;
pub mod dataset;
pub mod io;
pub mod run;
pub mod synth;
