use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use scribbletex_backends::ConfigError;
use scribbletex_core::backend::BackendError;
use scribbletex_core::image::ImageError;
use scribbletex_core::intent::IntentError;
use scribbletex_core::mask_map::RefineError;
use scribbletex_core::mesh::MeshError;
use scribbletex_core::scribble::ScribbleError;
use scribbletex_core::texturing::TexturingError;

use crate::session::Stage;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Validation(String),
    #[error("{stage} stage: backend error: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error("{stage} stage: {message}")]
    Stage { stage: Stage, message: String },
    #[error("regions {a} and {b} overlap in texture space")]
    OverlappingRegions { a: String, b: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stopped after the {0} stage")]
    Stopped(Stage),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 1 I/O, 2 validation, 3 backend, 4 pipeline.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 1,
            Self::Validation(_) | Self::NotFound(_) => 2,
            Self::Backend { .. } => 3,
            Self::Stage { .. } | Self::OverlappingRegions { .. } | Self::Stopped(_) => 4,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Validation(_) => "validation",
            Self::Backend { .. } => "backend",
            Self::Stage { .. } => "pipeline",
            Self::OverlappingRegions { .. } => "overlapping_regions",
            Self::NotFound(_) => "not_found",
            Self::Stopped(_) => "stopped",
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Self::Backend { stage, .. } | Self::Stage { stage, .. } | Self::Stopped(stage) => Some(*stage),
            _ => None,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord { code: self.code().to_string(), message: self.to_string(), stage: self.stage() }
    }

    pub fn from_image(path: &Path, e: ImageError) -> Self {
        match e {
            ImageError::Io(source) => Self::io(path, source),
            other => Self::Validation(format!("{}: {other}", path.display())),
        }
    }

    pub fn from_mesh(path: &Path, e: MeshError) -> Self {
        match e {
            MeshError::Io(source) => Self::io(path, source),
            other => Self::Validation(format!("{}: {other}", path.display())),
        }
    }

    pub fn from_refine(e: RefineError) -> Self {
        match e {
            RefineError::Scribble(s) => Self::Validation(s.to_string()),
            RefineError::ViewOrder { .. } => Self::Stage { stage: Stage::Refine, message: e.to_string() },
            RefineError::Segmentation { source, .. } => Self::Backend { stage: Stage::Refine, source },
        }
    }

    pub fn from_intent(stage: Stage, e: IntentError) -> Self {
        match e {
            IntentError::Backend(source) => Self::Backend { stage, source },
            IntentError::Malformed { problem, raw, .. } => {
                Self::Backend { stage, source: BackendError::malformed(format!("after reprompt: {problem}"), raw) }
            }
            other => Self::Stage { stage, message: other.to_string() },
        }
    }

    pub fn from_texturing(stage: Stage, e: TexturingError) -> Self {
        match e {
            TexturingError::Inpaint { source, .. } => Self::Backend { stage, source },
            other => Self::Stage { stage, message: other.to_string() },
        }
    }

    pub fn from_backend(stage: Stage, source: BackendError) -> Self {
        Self::Backend { stage, source }
    }
}

impl From<ScribbleError> for PipelineError {
    fn from(e: ScribbleError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::NoEndpoint { .. } => Self::Backend { stage: Stage::Setup, source: BackendError::Unreachable(e.to_string()) },
            other => Self::Validation(other.to_string()),
        }
    }
}

/// Serialized form of a stage failure, as stored in region state and sent
/// in HTTP error bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
    pub stage: Option<Stage>,
}
