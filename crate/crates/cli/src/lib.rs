//! Experiment harness for the toy translation model: synthetic data,
//! configuration, training runs, inference, evaluation and sweeps.

pub mod config;
pub mod data;
pub mod experiment;
