//! End-to-end runs: configuration, file formats, experiments.

pub mod commands;
pub mod config;
pub mod convergence;
pub mod io;
pub mod mask_eval;
pub mod run;
pub mod shapes;
