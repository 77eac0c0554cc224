//! CLI failures, their exit codes and the JSON envelope printed on stderr.

use std::io::ErrorKind;

use serde_json::{json, Value};
use uncanny_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_MISSING_INPUT: u8 = 4;
pub const EXIT_INTEGRITY: u8 = 5;
pub const EXIT_RUNTIME: u8 = 6;
pub const EXIT_PARTIAL: u8 = 7;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    MissingInput(String),
    /// Some items of a batch (or some selftest criteria) failed; outputs for
    /// the rest were written.
    Partial {
        message: String,
        context: Value,
    },
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Partial { .. } => EXIT_PARTIAL,
            CliError::Core(e) => match e {
                Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_MISSING_INPUT,
                Error::Config(_) | Error::InvalidArgument(_) | Error::BackendUnavailable(_) => EXIT_CONFIG,
                Error::Integrity(_) | Error::Format { .. } => EXIT_INTEGRITY,
                _ => EXIT_RUNTIME,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Partial { .. } => "partial_failure",
            CliError::Core(Error::Io { source, .. }) if source.kind() == ErrorKind::NotFound => "missing_input",
            CliError::Core(e) => e.code(),
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::MissingInput(m) => m.clone(),
            CliError::Partial { message, .. } => message.clone(),
            CliError::Core(e) => e.to_string().lines().next().unwrap_or_default().to_string(),
        }
    }

    /// `{code, message, context}` with the command name and any path.
    pub fn envelope(&self, command: &str) -> Value {
        let mut context = match self {
            CliError::Partial { context, .. } => context.clone(),
            _ => json!({}),
        };
        context["command"] = json!(command);
        let path = match self {
            CliError::Core(
                Error::Io { path, .. }
                | Error::Image { path, .. }
                | Error::Format { path, .. }
                | Error::NonRgb { path, .. },
            ) => Some(path.display().to_string()),
            _ => None,
        };
        if let Some(p) = path {
            context["path"] = json!(p);
        }
        json!({"code": self.code(), "message": self.message(), "context": context})
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let missing = CliError::Core(Error::io("x.png", std::io::Error::from(ErrorKind::NotFound)));
        let denied = CliError::Core(Error::io("x.png", std::io::Error::from(ErrorKind::PermissionDenied)));
        assert_eq!(missing.exit_code(), EXIT_MISSING_INPUT);
        assert_eq!(missing.code(), "missing_input");
        assert_eq!(denied.exit_code(), EXIT_RUNTIME);
        assert_eq!(CliError::Core(Error::Integrity("x".into())).exit_code(), EXIT_INTEGRITY);
        assert_eq!(CliError::Core(Error::Config("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
    }

    #[test]
    fn envelope_carries_command_and_path() {
        let e = CliError::Core(Error::io("in/x.png", std::io::Error::from(ErrorKind::NotFound)));
        let v = e.envelope("realify");
        assert_eq!(v["code"], "missing_input");
        assert_eq!(v["context"]["command"], "realify");
        assert_eq!(v["context"]["path"], "in/x.png");
    }
}
