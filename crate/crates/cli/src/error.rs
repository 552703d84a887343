use std::fmt;

use thiserror::Error;

use crate::config::Diagnostic;

/// Pipeline stages in execution order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Filter,
    Cluster,
    Fuse,
    Densify,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Filter, Stage::Cluster, Stage::Fuse, Stage::Densify, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Filter => "filter",
            Stage::Cluster => "cluster",
            Stage::Fuse => "fuse",
            Stage::Densify => "densify",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a failure maps onto the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", render(.0))]
    Config(Vec<Diagnostic>),
    #[error("{stage} stage failed: {source:#}")]
    Stage { stage: Stage, kind: FailureKind, source: anyhow::Error },
    #[error("{context}: {source:#}")]
    Other { context: String, kind: FailureKind, source: anyhow::Error },
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let kind = match self {
            CliError::Config(_) => return 2,
            CliError::Stage { kind, .. } | CliError::Other { kind, .. } => *kind,
        };
        match kind {
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
        }
    }

    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config(vec![Diagnostic::new(None, key, message)])
    }
}

/// Attaches a stage and failure kind to a fallible stage step.
pub trait StageContext<T> {
    fn in_stage(self, stage: Stage, kind: FailureKind) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> StageContext<T> for Result<T, E> {
    fn in_stage(self, stage: Stage, kind: FailureKind) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage { stage, kind, source: e.into() })
    }
}
