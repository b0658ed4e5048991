use std::fmt;

/// Failure of a command: a stable kind tag plus a human-readable message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError { kind: "usage", message: msg.into() }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }

    /// Single line, `error kind=<tag> message=<JSON string>`.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.message).unwrap_or_else(|_| "\"?\"".into());
        format!("error kind={} message={msg}", self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<bestow_core::Error> for CliError {
    fn from(e: bestow_core::Error) -> Self {
        use bestow_core::Error as E;
        let kind = match &e {
            E::Shape { .. } => "shape",
            E::InvalidArgument(_) => "invalid_argument",
            E::NonFinite(_) => "non_finite",
            E::UnknownToken { .. } => "unknown_token",
            E::CacheMismatch(_) => "cache_mismatch",
            E::UnknownPolicy { .. } => "unknown_policy",
            E::FrameSource(_) => "frame_source",
            E::TimerResolution { .. } => "timer_resolution",
            E::Format(_) => "format",
            E::Io(_) => "io",
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: "io", message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: "format", message: e.to_string() }
    }
}
