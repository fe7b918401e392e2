use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StsError> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants group into three classes that the CLI and the C ABI map onto
/// distinct exit/status codes: validation, numerical and I/O.
#[derive(Debug, Error)]
pub enum StsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("zero-norm embedding for class {class} (`{class_name}`), template {template}")]
    DegenerateEmbedding {
        class: usize,
        class_name: String,
        template: usize,
    },

    #[error("shift annihilated the prototype of class {class} (norm {norm:e})")]
    AnnihilatedPrototype { class: usize, norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("svd did not converge after {iterations} iterations on a {rows}x{cols} matrix")]
    SvdConvergence {
        rows: usize,
        cols: usize,
        iterations: usize,
    },

    #[error("bundle format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("bundle corrupted: {0}")]
    Corruption(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("manifest validation failed: {0}")]
    Validation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("sample `{sample_id}`: {source}")]
    Episode {
        sample_id: String,
        #[source]
        source: Box<StsError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl StsError {
    pub fn class(&self) -> ErrorClass {
        match self {
            StsError::AnnihilatedPrototype { .. }
            | StsError::Numerical(_)
            | StsError::SvdConvergence { .. }
            | StsError::DegenerateSpectrum(_) => ErrorClass::Numerical,
            StsError::Io { .. } => ErrorClass::Io,
            StsError::Episode { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }

    /// 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        StsError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_sample(self, sample_id: &str) -> Self {
        StsError::Episode {
            sample_id: sample_id.to_string(),
            source: Box::new(self),
        }
    }
}
