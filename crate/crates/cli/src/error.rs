use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Convergence,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::Convergence => 3,
            ErrorKind::Io => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Convergence => "convergence",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// Extra machine-readable context (e.g. the best-so-far fit).
    pub details: Option<Value>,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Validation, message: message.into(), details: None }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Io, message: message.into(), details: None }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// The block written to standard error.
    pub fn to_json(&self) -> Value {
        let mut block = json!({
            "kind": self.kind.as_str(),
            "message": self.message,
            "exit_code": self.exit_code(),
        });
        if let Some(d) = &self.details {
            block["details"] = d.clone();
        }
        json!({ "error": block })
    }
}

impl From<cglmm::Error> for CliError {
    fn from(e: cglmm::Error) -> Self {
        match e {
            cglmm::Error::NotConverged { ref best } => CliError {
                kind: ErrorKind::Convergence,
                message: e.to_string(),
                details: serde_json::to_value(best.as_ref()).ok(),
            },
            other => CliError::validation(other.to_string()),
        }
    }
}
