//! Output staging, the run manifest and exit codes.
//!
//! Every file is rendered in memory first and only written once the command
//! has produced all of its outputs, so configuration errors leave nothing
//! behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Why a command did not finish cleanly.
#[derive(Debug)]
pub enum Failure {
    /// Unusable configuration or input; nothing was written.
    Config(anyhow::Error),
    /// The solver stopped short of its tolerance; outputs were written.
    NotConverged(String),
    Io(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Config(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Io(_) => 4,
        })
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::NotConverged(msg) => write!(f, "not converged: {msg}"),
            Failure::Io(e) => write!(f, "i/o error: {e:#}"),
        }
    }
}

pub fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

/// Maps library errors onto exit categories.
pub fn core_err(e: qre_core::Error) -> Failure {
    match category(&e) {
        Category::Config => Failure::Config(e.into()),
        Category::Io => Failure::Io(e.into()),
        Category::Solver => Failure::NotConverged(e.to_string()),
    }
}

/// True for errors where the solver ran but stopped short.
pub fn is_solver_failure(e: &qre_core::Error) -> bool {
    matches!(category(e), Category::Solver)
}

enum Category {
    Config,
    Io,
    Solver,
}

fn category(e: &qre_core::Error) -> Category {
    use qre_core::Error as E;
    match e {
        E::Io(_) | E::Csv(_) => Category::Io,
        E::Divergence { .. } | E::QreNotConverged { .. } | E::NonFinite(_) | E::StepSize { .. } | E::QuadratureTooCoarse { .. } => {
            Category::Solver
        }
        E::AtLambda { source, .. } => category(source),
        _ => Category::Config,
    }
}

/// Files of one run, staged in memory.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Renders a CSV via `f` into the staged file `name`.
    pub fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> qre_core::Result<()>) -> Result<(), Failure> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(core_err)?;
        self.add(name, buf);
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct FileEntry {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    artifact: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config: &'a C,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<FileEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct Run {
    started: u64,
}

impl Run {
    pub fn start() -> Self {
        Self { started: now() }
    }

    /// Writes every staged file and then the manifest listing them with hashes.
    pub fn finish<C: Serialize>(self, out_dir: &Path, command: &str, seed: u64, config: &C, outputs: Outputs) -> Result<Vec<PathBuf>, Failure> {
        let io = |e: std::io::Error, p: &Path| Failure::Io(anyhow::Error::new(e).context(format!("writing {}", p.display())));
        fs::create_dir_all(out_dir).map_err(|e| io(e, out_dir))?;
        let mut written = Vec::new();
        let mut entries = Vec::new();
        for (name, bytes) in &outputs.files {
            let path = out_dir.join(name);
            fs::write(&path, bytes).map_err(|e| io(e, &path))?;
            entries.push(FileEntry {
                file: name.clone(),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(bytes)),
            });
            written.push(path);
        }
        let manifest = Manifest {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().skip(1).collect(),
            seed,
            config,
            started_unix: self.started,
            finished_unix: now(),
            outputs: entries,
        };
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Failure::Io(e.into()))?;
        let path = out_dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| io(e, &path))?;
        written.push(path);
        Ok(written)
    }
}
