//! Everything around the core library that touches disk or a terminal:
//! dataset generation, run configuration, checkpoints, the protection and
//! attack pipelines, diagnostics emitters, and end-to-end orchestration.

pub mod attack_run;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnose;
pub mod endtoend;
pub mod protect_run;
