//! Errors, exit codes and atomic file output.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;
use tempfile::NamedTempFile;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Format(_) => "format",
            CliError::Io(_) => "io",
            CliError::Diverged { .. } => "diverged",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Diverged { .. } => 3,
            _ => 2,
        }
    }

    /// Print the error as JSON on stderr and return the exit code.
    pub fn report(&self) -> ExitCode {
        let mut obj = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        if let CliError::Diverged { step } = self {
            obj["step"] = (*step).into();
        }
        eprintln!("{obj}");
        ExitCode::from(self.exit_code())
    }
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
