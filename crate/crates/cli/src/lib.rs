//! Library surface of the starclust CLI, kept separate from `main` so the
//! integration and acceptance tests can drive the commands in-process.

pub mod commands;
pub mod config;

pub use commands::{atomic_write, cmd_detect, cmd_eval, cmd_synth, CliError, DetectOutcome};
pub use config::{apply_key, load_config_file, parse_config_text, ConfigError, RunConfig};
