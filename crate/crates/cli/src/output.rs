use std::fmt;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use tempfile::NamedTempFile;

/// Error carrying the process exit code: 1 for invalid input values or
/// failed checks, 2 for unreadable or malformed files.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn invalid(error: impl Into<anyhow::Error>) -> Self {
        CliError { code: 1, error: error.into() }
    }

    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        CliError { code: 2, error: error.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<detgain_core::Error> for CliError {
    fn from(e: detgain_core::Error) -> Self {
        if e.is_input_error() {
            CliError::input(e)
        } else {
            CliError::invalid(e)
        }
    }
}

pub type CmdResult<T = ()> = Result<T, CliError>;

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))
        .map_err(CliError::input)?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::input)?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))
        .map_err(CliError::input)?;
    Ok(())
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> CmdResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(CliError::invalid)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes to `out` atomically, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .context("writing to stdout")
            .map_err(CliError::input),
    }
}
