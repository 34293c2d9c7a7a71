//! Experiment runner: flux scans, monotonicity and coupling audits,
//! environment classification and single-particle invariant measures.
//! Every command reads one config file and writes CSV tables.

use std::path::{Path, PathBuf};

use exclusion_core::{EnvError, ExactError, FreeError, SimError};
use thiserror::Error;

pub mod commands;
pub mod config;

pub use commands::{audit_coupling, audit_monotone, classify_env, scan_flux, sigma_solve};
pub use config::{load, parse, ExperimentConfig, LoadedConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Free(#[from] FreeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What a command found.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok { summary: String },
    Violation { summary: String },
}

impl Status {
    pub fn exit_code(&self) -> u8 {
        match self {
            Status::Ok { .. } => 0,
            Status::Violation { .. } => 2,
        }
    }

    pub fn summary(&self) -> &str {
        match self {
            Status::Ok { summary } | Status::Violation { summary } => summary,
        }
    }
}

/// A CSV table with `#` header comments.
pub struct Table {
    comments: Vec<String>,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(loaded: &LoadedConfig, command: &str, header: &[&'static str]) -> Self {
        Table {
            comments: vec![
                format!("config_sha256={}", loaded.hash),
                format!("tool=exclusion-cli {}", env!("CARGO_PKG_VERSION")),
                format!("command={command}"),
                format!("name={}", loaded.config.name),
            ],
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, line: impl Into<String>) {
        self.comments.push(line.into());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> Result<String, CliError> {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Config(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    pub fn write(&self, dir: &Path, file: &str) -> Result<PathBuf, CliError> {
        let io = |source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(file);
        std::fs::write(&path, self.render()?).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

pub(crate) fn num(x: f64) -> String {
    exclusion_core::fmt_sig17(x)
}

pub(crate) fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
