//! Experiment harness: configuration, orchestration and artifacts.

pub mod config;
pub mod experiment;
pub mod output;
pub mod run;
