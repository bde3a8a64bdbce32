use std::fmt::Display;
use std::path::Path;

use coldselect::baselines::ManualVerbalizerError;
use coldselect::clustering::ClusteringError;
use coldselect::embed_io::EmbedIoError;
use coldselect::geometry::GeometryError;
use coldselect::selection::SelectionError;
use coldselect::simulation::SimulationError;
use coldselect::synthetic::SyntheticError;
use coldselect::verbalizer_eval::EvalError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn data(context: impl Display, err: impl Display) -> Self {
        CliError::Data(format!("{context}: {err}"))
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn embed_kind(e: &EmbedIoError) -> &'static str {
    match e {
        EmbedIoError::MagicMismatch { .. } => "MagicMismatch",
        EmbedIoError::VersionUnsupported { .. } => "VersionUnsupported",
        EmbedIoError::HeaderMalformed(_) => "HeaderMalformed",
        EmbedIoError::SizeMismatch { .. } => "SizeMismatch",
        EmbedIoError::NonFiniteValue { .. } => "NonFiniteValue",
        EmbedIoError::DuplicateId(_) => "DuplicateId",
        EmbedIoError::MalformedLine { .. } => "MalformedLine",
        EmbedIoError::IoFailure { .. } => "IoFailure",
    }
}

/// Embedding errors keep the variant name so scripts can match on it.
pub fn embed_error(path: &Path, e: EmbedIoError) -> CliError {
    CliError::Data(format!("{}: {}: {e}", embed_kind(&e), path.display()))
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::data("shared space", e)
    }
}

impl From<ClusteringError> for CliError {
    fn from(e: ClusteringError) -> Self {
        CliError::data("clustering", e)
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            SelectionError::UnknownClass(_) | SelectionError::ProviderFailure(_) => CliError::data("selection", e),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::data("evaluation", e)
    }
}

impl From<ManualVerbalizerError> for CliError {
    fn from(e: ManualVerbalizerError) -> Self {
        CliError::data("manual verbalizers", e)
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        CliError::data("synthetic spec", e)
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Synthetic(e) => e.into(),
            SimulationError::Geometry(e) => e.into(),
            SimulationError::Clustering(e) => e.into(),
            SimulationError::Selection(e) => e.into(),
            SimulationError::Eval(e) => e.into(),
            SimulationError::Manual(e) => e.into(),
        }
    }
}
