//! Run manifests. A manifest with status `running` is written before any
//! result file and rewritten as `ok` or `failed` when the command ends, so an
//! interrupted run leaves `running` behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::{sha256_file, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub error: Option<String>,
    pub config: serde_json::Value,
    /// sha256 of each input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub version: String,
    pub threads: usize,
    pub wall_time_s: Option<f64>,
    pub timings: BTreeMap<String, f64>,
}

pub struct Manifest {
    path: PathBuf,
    record: RunManifest,
    start: Instant,
}

impl Manifest {
    pub fn begin(out_dir: &Path, command: &str, config: &impl Serialize, inputs: &[&Path]) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::output(out_dir, e))?;
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        let config = serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?;
        let m = Manifest {
            path: out_dir.join(MANIFEST_FILE),
            record: RunManifest {
                command: command.to_string(),
                status: "running".into(),
                error: None,
                config,
                inputs: digests,
                version: env!("CARGO_PKG_VERSION").to_string(),
                threads: rayon::current_num_threads(),
                wall_time_s: None,
                timings: BTreeMap::new(),
            },
            start: Instant::now(),
        };
        write_json(&m.path, &m.record)?;
        Ok(m)
    }

    pub fn add_timings(&mut self, timings: &BTreeMap<String, f64>) {
        for (k, v) in timings {
            *self.record.timings.entry(k.clone()).or_insert(0.0) += v;
        }
    }

    /// Run `body`, then record its outcome.
    pub fn run<T>(mut self, body: impl FnOnce(&mut Self) -> CliResult<T>) -> CliResult<T> {
        let out = body(&mut self);
        self.record.wall_time_s = Some(self.start.elapsed().as_secs_f64());
        match &out {
            Ok(_) => self.record.status = "ok".into(),
            Err(e) => {
                self.record.status = "failed".into();
                self.record.error = Some(e.to_string());
            }
        }
        write_json(&self.path, &self.record)?;
        out
    }
}
