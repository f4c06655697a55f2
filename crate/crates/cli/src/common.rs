//! Shared plumbing for the subcommands: exit-code classification, config
//! overlay loading, input/output helpers, and small flag parsers.
//!
//! Error philosophy: anything the user can fix by changing flags, config
//! values, or input files exits with code 1; failures while executing an
//! otherwise valid request (diverging training, unwritable outputs) exit
//! with code 2.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use hiermix_core::checkpoint;
use hiermix_core::dataset::{load_features, Dataset, FileFormat};
use hiermix_core::hierarchy::Hierarchy;
use hiermix_core::trainer::{ThetaSpec, TrainState};
use hiermix_core::Error as CoreError;

/// A failure plus the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Exit code 1: bad flags, bad config values, unreadable or malformed
    /// inputs, mismatched shapes.
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    /// Exit code 2: the request was valid but executing it failed.
    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Classifies a library error raised mid-computation: validation-style
/// problems are the user's to fix, non-finite numbers and I/O are runtime
/// failures.
pub fn from_core(err: CoreError) -> CliError {
    let code = match &err {
        CoreError::Dimension { .. }
        | CoreError::InvalidInput(_)
        | CoreError::InvalidDistribution(_)
        | CoreError::InvalidConfig(_)
        | CoreError::Parse { .. }
        | CoreError::Mismatch(_) => 1,
        CoreError::NonFinite { .. } | CoreError::Io(_) | CoreError::Json(_) => 2,
    };
    CliError {
        code,
        message: err.to_string(),
    }
}

/// A failure to read a user-supplied file is an input error regardless of
/// the underlying cause.
pub fn read_err(what: &str, path: &Path, err: impl Display) -> CliError {
    CliError::input(format!("cannot read {what} {}: {err}", path.display()))
}

/// A failure to write an artifact is a runtime error.
pub fn write_err(what: &str, path: &Path, err: impl Display) -> CliError {
    CliError::runtime(format!("cannot write {what} {}: {err}", path.display()))
}

// --- run-directory artifacts ------------------------------------------------

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| write_err("directory", path, e))
}

/// Pretty-printed JSON artifact with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| write_err("JSON for", path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| write_err("file", path, e))
}

pub fn write_text(text: &str, path: &Path) -> CliResult<()> {
    fs::write(path, text).map_err(|e| write_err("file", path, e))
}

// --- config overlays ---------------------------------------------------------

/// Loads the optional `--config` JSON overlay. Absent file means "no
/// overrides"; the overlay type's `Default` supplies all-`None` fields.
pub fn load_overlay<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| read_err("config file", p, e))?;
            serde_json::from_str(&text).map_err(|e| read_err("config file", p, e))
        }
    }
}

/// Flag value if given, else config-file value, else the built-in default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag value if given, else config-file value; errors when neither is set.
pub fn pick_required<T>(flag: Option<T>, file: Option<T>, flag_name: &str, key: &str) -> CliResult<T> {
    flag.or(file).ok_or_else(|| {
        CliError::input(format!(
            "missing --{flag_name} (or \"{key}\" in the config file)"
        ))
    })
}

// --- input loading ------------------------------------------------------------

/// Loads a dataset, picking the format from the extension: `.bin` is the
/// packed binary format, anything else is CSV.
pub fn load_dataset(path: &Path, declared_classes: Option<usize>) -> CliResult<Dataset> {
    let format = if path.extension().is_some_and(|e| e == "bin") {
        FileFormat::Binary
    } else {
        FileFormat::Csv
    };
    load_features(path, format, declared_classes).map_err(|e| match e {
        CoreError::Io(io) => read_err("dataset", path, io),
        other => CliError::input(format!("invalid dataset {}: {other}", path.display())),
    })
}

pub fn load_hierarchy(path: &Path) -> CliResult<Hierarchy> {
    Hierarchy::load_json(path).map_err(|e| match e {
        CoreError::Io(io) => read_err("hierarchy", path, io),
        other => CliError::input(format!("invalid hierarchy {}: {other}", path.display())),
    })
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    checkpoint::load(path).map_err(|e| match e {
        CoreError::Io(io) => read_err("checkpoint", path, io),
        other => CliError::input(format!("invalid checkpoint {}: {other}", path.display())),
    })
}

// --- flag parsing --------------------------------------------------------------

/// `--theta` accepts a named scheme ("uniform", "bottom-only") or a comma
/// list of per-level weights.
pub fn parse_theta(text: &str) -> ThetaSpec {
    let weights: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    match weights {
        Ok(w) if !w.is_empty() => ThetaSpec::Explicit(w),
        _ => ThetaSpec::Named(text.to_string()),
    }
}

pub fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}
