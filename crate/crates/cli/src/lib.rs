//! File formats and the `esnet` command-line tool.

pub mod commands;
pub mod config;
pub mod pnm;
pub mod weights;

pub use commands::{run_cli, CliError};
pub use config::{NetConfig, StageConfig};
