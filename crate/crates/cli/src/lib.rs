//! Experiment runner behind the `carvecache` binary.
//!
//! Configuration is a TOML file with `[step_cache]`, `[carve]`, `[agg]`,
//! `[sim]`, `[mesh]` and `[sweep]` sections. Flags override file values.
//! Results are one [`output::MetricsRow`] per `(config point, seed)`.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime error, 4 IO error.

pub mod cli;
pub mod config;
pub mod error;
pub mod output;
pub mod runner;

pub use cli::run_cli;
pub use config::{parse_config, Command, ExperimentConfig, OutputFormat};
pub use error::CliError;
pub use output::MetricsRow;
pub use runner::{collect_rows, run_experiment};
