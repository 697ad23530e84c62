//! Experiment harness: configuration, matrix cache, artifacts and scenarios.

pub mod cache;
pub mod config;
pub mod output;
pub mod scenarios;
