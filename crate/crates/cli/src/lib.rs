//! Configuration and orchestration behind the `pcrlb-design` binary.

pub mod app;
pub mod config;

pub use app::{run, Command, RunError};
pub use config::{parse_config, parse_config_str, ConfigError, Overrides, Preset, RunConfig};
