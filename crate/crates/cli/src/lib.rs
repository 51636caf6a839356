//! Experiment runner for divide-and-couple variational inference.

pub mod config;
pub mod sweep;
pub mod validate;
