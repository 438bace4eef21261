use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub toolkit_version: String,
    pub wall_time_s: f64,
    pub exit_code: i32,
}

pub struct Recorder {
    started: Instant,
    pub manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str) -> Recorder {
        Recorder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config_hash: String::new(),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_time_s: 0.0,
                exit_code: 0,
            },
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        let text = serde_json::to_string(cfg).unwrap_or_default();
        self.manifest.config_hash = hex::encode(Sha256::digest(text.as_bytes()));
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    /// Manifest location: inside a directory output, otherwise beside the
    /// first file output.
    fn path(&self) -> Option<PathBuf> {
        let first = self.manifest.outputs.first()?;
        if first.is_dir() {
            Some(first.join("run-manifest.json"))
        } else {
            let mut name = first.file_name()?.to_os_string();
            name.push(".manifest.json");
            Some(first.with_file_name(name))
        }
    }

    pub fn finish(mut self, exit_code: i32) {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.exit_code = exit_code;
        if let Some(p) = self.path() {
            let text = serde_json::to_string_pretty(&self.manifest).unwrap_or_default();
            if let Err(e) = std::fs::write(&p, text) {
                log::warn!("could not write {}: {e}", p.display());
            }
        }
    }
}
