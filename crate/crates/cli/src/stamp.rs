//! `run.json`: the resolved configuration, seed, code version and input
//! fingerprints of one subcommand invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use editloc::checkpoint::file_sha256;
use editloc::dataset::Manifest;
use editloc::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const STAMP_FILE: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
pub struct Input {
    pub role: String,
    pub path: PathBuf,
    /// SHA-256 of a file, or the content fingerprint of a dataset.
    pub fingerprint: String,
}

#[derive(Debug, Serialize)]
pub struct RunStamp {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub seed: u64,
    pub seed_labels: Vec<&'static str>,
    pub config: RunConfig,
    pub inputs: Vec<Input>,
    pub elapsed_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunStamp {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            seed_labels: crate::config::SEED_LABELS.to_vec(),
            config: config.clone(),
            inputs: Vec::new(),
            elapsed_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn file(&mut self, role: &str, path: &Path) -> Result<()> {
        let fingerprint = file_sha256(path)?;
        self.inputs.push(Input {
            role: role.to_string(),
            path: path.to_path_buf(),
            fingerprint,
        });
        Ok(())
    }

    pub fn dataset(&mut self, path: &Path, manifest: &Manifest) {
        self.inputs.push(Input {
            role: "dataset".to_string(),
            path: path.to_path_buf(),
            fingerprint: manifest.fingerprint(),
        });
    }

    pub fn fingerprint(&mut self, role: &str, path: &Path, fingerprint: String) {
        self.inputs.push(Input {
            role: role.to_string(),
            path: path.to_path_buf(),
            fingerprint,
        });
    }

    /// Writes the stamp to `path`, creating parent directories.
    pub fn write(mut self, path: &Path) -> Result<()> {
        if let Some(t) = self.started {
            self.elapsed_seconds = t.elapsed().as_secs_f64();
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&self).expect("stamp serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Stamp location for a command writing into `out`: `out/run.json` for a
/// directory, `<out>.run.json` next to a single output file.
pub fn stamp_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join(STAMP_FILE)
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".");
        name.push(STAMP_FILE);
        out.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_paths() {
        assert_eq!(stamp_path(Path::new("runs/a"), true), Path::new("runs/a/run.json"));
        assert_eq!(
            stamp_path(Path::new("out/report.json"), false),
            Path::new("out/report.json.run.json")
        );
    }
}
