//! File formats, configuration and the experiment pipeline behind the
//! `koopctl` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
