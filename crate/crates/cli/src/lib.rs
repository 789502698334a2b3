//! Library side of the `chipletsim` command: configuration loading, stage
//! orchestration and the reproduction report.

pub mod config;
pub mod oracles;
pub mod pipeline;
pub mod repro;

pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use pipeline::{run_pipeline, Manifest, PipelineError, Stage};
pub use repro::{reproduce, Claim, ReproReport};

/// Column layout of every CSV the tool writes.
pub const CSV_SCHEMA: &str = include_str!("../schema/csv_outputs.json");

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CLAIM_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const RUNTIME: u8 = 3;
}
