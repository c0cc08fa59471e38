//! Experiment orchestration for SPARC: configuration, dataset loading and
//! generation, the `train` / `baseline` / `ablate` / `report` commands and
//! the artifacts they write.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{run, Cli, Command};
pub use commands::{
    cmd_ablate, cmd_baseline, cmd_generate, cmd_report, cmd_train, load_data, AblationGrid, AblationRow, Report,
    RunArtifacts,
};
pub use config::{DataSource, ExperimentConfig, SyntheticSpec};
pub use error::{CliError, Result};
