//! Command-line driver and HTTP service for pairkb.

pub mod commands;
pub mod config;
pub mod service;
pub mod specs;

pub use commands::{run, Cli};
pub use config::EngineConfig;
