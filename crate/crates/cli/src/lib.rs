//! Experiment driver: configuration, artifact plumbing and the pipeline
//! steps behind the `eaaw` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};

/// Worker cap for sweeps: `EAAW_THREADS` if set, else the machine's
/// available parallelism.
pub fn thread_cap(env: Option<&str>) -> Result<usize> {
    match env {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "EAAW_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        None => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
    }
}
