//! Run manifests, output paths and error-to-exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::OUTPUT_ROOT_ENV;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(dfrnn::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<dfrnn::Error> for CliError {
    fn from(e: dfrnn::Error) -> Self {
        CliError::Core(e)
    }
}

/// 2 usage or configuration, 3 data or checkpoint, 4 numeric failure.
pub fn exit_code(e: &CliError) -> u8 {
    use dfrnn::Error as E;
    match e {
        CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
        CliError::Core(E::Numeric(_)) => 4,
        CliError::Core(_) => 3,
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(dfrnn::Error::io(path, e))
}

pub fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// SHA-256 of the running executable.
pub fn code_hash() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|bytes| format!("sha256:{:x}", Sha256::digest(bytes)))
        .unwrap_or_else(|_| format!("version:{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// TOML text of the effective configuration, when the command has one.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub code_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config: None,
            seed: None,
            code_hash: code_hash(),
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix = unix_now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}
