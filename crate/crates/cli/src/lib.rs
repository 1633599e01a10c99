//! Config-driven experiment runner for `hjlab`: declares a problem and a
//! pipeline of stages, runs them in order, and writes CSV tables, a JSON
//! summary, plot data and a run manifest.

pub mod config;
pub mod output;
pub mod presets;
pub mod runner;

pub use config::{
    ExperimentConfig, Format, GridConfig, InitialConfig, OutputConfig, ProblemConfig, StageConfig, StageKind,
};
pub use output::{RunManifest, StageRecord, StageStatus, StageSummary, Summary};
pub use presets::{preset, PRESET_NAMES};
pub use runner::{run_experiment, RunOutcome};

/// Errors of the runner. Schema and validation problems map to exit code 1,
/// everything raised while computing to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown preset '{0}' (known: {known})", known = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] hjlab::Error),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, reason: impl std::fmt::Display) -> Self {
        CliError::Invalid { field: field.into(), reason: reason.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) | CliError::Invalid { .. } | CliError::UnknownPreset(_) => 1,
            CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }
}
