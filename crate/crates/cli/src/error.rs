//! Command failures with stable codes and process exit statuses.

use r2p_core::db::DbError;
use r2p_core::enrollment::EnrollmentError;
use r2p_core::eval::run::EvalError;
use r2p_core::eval::SplitError;
use r2p_core::gateway::GatewayError;
use r2p_core::image::ImageError;
use r2p_core::inference::InferenceError;
use serde_json::json;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_DOMAIN: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_RUNTIME,
            code,
            message: message.into(),
        }
    }

    pub fn domain(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_DOMAIN,
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_USAGE,
            code: "USAGE",
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::runtime("IO_ERROR", format!("{}: {e}", path.display()))
    }

    /// One-line JSON rendering written to stderr.
    pub fn to_json(&self) -> String {
        json!({"error": {"code": self.code, "message": self.message}}).to_string()
    }
}

impl From<EnrollmentError> for CliError {
    fn from(e: EnrollmentError) -> Self {
        Self::runtime(e.code(), e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) => Self::usage(e.to_string()),
            GatewayError::BackendUnavailable { .. } => {
                Self::runtime("BACKEND_UNAVAILABLE", e.to_string())
            }
            _ => Self::runtime("GATEWAY_ERROR", e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::UnknownTargetConcept(_) => {
                Self::domain("UNKNOWN_TARGET_CONCEPT", e.to_string())
            }
            InferenceError::Config(_) => Self::usage(e.to_string()),
            InferenceError::Gateway(g) => g.into(),
            InferenceError::Retrieval(_) => Self::runtime("RETRIEVAL_ERROR", e.to_string()),
            _ => Self::runtime("PIPELINE_ERROR", e.to_string()),
        }
    }
}

impl From<DbError> for CliError {
    fn from(e: DbError) -> Self {
        let code = match e {
            DbError::SchemaVersionUnsupported(_) => "SCHEMA_VERSION_UNSUPPORTED",
            DbError::CorruptRecord { .. } | DbError::CorruptManifest(_) => "CORRUPT_DATABASE",
            DbError::Io { .. } => "IO_ERROR",
            _ => "DATABASE_ERROR",
        };
        Self::runtime(code, e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        Self::runtime("IMAGE_ERROR", e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Io { .. } => "IO_ERROR",
            _ => "EVAL_ERROR",
        };
        Self::runtime(code, e.to_string())
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        Self::runtime("SPLIT_ERROR", e.to_string())
    }
}
