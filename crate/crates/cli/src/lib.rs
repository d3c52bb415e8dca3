//! Command implementations behind the `sparsefocus` binary.
//!
//! Exit codes: 0 success, 2 usage or contract violation, 1 I/O failure,
//! 3 numerical or partial failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod commands;

pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An error that carries its own exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> anyhow::Error {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
        .into()
    }

    pub fn partial(message: impl Into<String>) -> anyhow::Error {
        Failure {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
        .into()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<sparsefocus::Error>() {
            return match e {
                sparsefocus::Error::NonFinite(_) => EXIT_NUMERIC,
                sparsefocus::Error::Io(_)
                | sparsefocus::Error::MissingFile(_)
                | sparsefocus::Error::SizeMismatch { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_IO
}

/// Hex sha256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Record of one run directory. Written when the run starts and rewritten
/// when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub variant: Option<String>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
    pub status: String,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn start(config_hash: String, seeds: Vec<u64>, variant: Option<String>) -> Self {
        RunManifest {
            command_line: std::env::args().collect(),
            config_hash,
            seeds,
            variant,
            started_unix_s: unix_now(),
            finished_unix_s: None,
            status: "running".into(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn finish(&mut self, status: &str, artifacts: Vec<PathBuf>) {
        self.finished_unix_s = Some(unix_now());
        self.status = status.into();
        self.artifacts = artifacts;
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        read_json(&dir.join(RUN_MANIFEST))
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Thread cap from `SPARSEFOCUS_THREADS`, if set to a positive integer.
pub fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("SPARSEFOCUS_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::usage(format!(
                "SPARSEFOCUS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Creates `dir`, refusing to reuse a non-empty directory.
pub fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Failure::usage(format!(
            "{} exists and is not empty",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
