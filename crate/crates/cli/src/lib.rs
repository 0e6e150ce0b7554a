//! Configuration, orchestration and output writing behind the `odmr13c` binary.

pub mod config;
pub mod run;
pub mod svg;

use std::path::{Path, PathBuf};

pub use config::{load_config, parse_config, RunConfig};
pub use run::{fit, run_fit, run_simulate, simulate};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("fit did not converge ({0})")]
    NotConverged(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 1 for bad input or I/O, 2 for a fit that did not converge.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::NotConverged(_) => 2,
            _ => 1,
        }
    }
}
