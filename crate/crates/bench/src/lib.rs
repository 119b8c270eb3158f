//! Library half of the `rso-bench` binary: experiment configs, the
//! verification suites, training runs, sweeps and memory reports. The binary
//! only parses flags and maps outcomes to exit codes.

pub mod config;
pub mod memory;
pub mod outcome;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::{ExperimentConfig, OptimizerSpec, Precision, ProblemSpec};
pub use outcome::{CliError, Exit};

use std::path::{Path, PathBuf};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "RSO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "rso-out";

/// Creates `dir` and checks that it accepts writes before any compute runs.
pub fn prepare_out_dir(dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".rso-write-probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| CliError::usage(format!("{} is not writable: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn to_json<S: serde::Serialize>(value: &S) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    text
}
