//! Configuration, orchestration and file output for the `pnp` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{converge_cmd, run, scan_cmd, timing_cmd, CliError};
pub use config::{ConfigError, RunConfig};

/// Rayon pool size from `PNP_THREADS`, defaulting to the machine parallelism.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PNP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("PNP_THREADS: expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}
