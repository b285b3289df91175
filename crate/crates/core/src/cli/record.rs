//! Append-only JSON-lines log of artifact-producing commands.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data_io::sha256_file;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    /// Path → SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub finished_unix: u64,
}

/// Collects hashes while a command runs; `finish` appends one line.
pub struct RunLog {
    record: RunRecord,
    started: Instant,
}

impl RunLog {
    pub fn start(command: &str) -> Self {
        RunLog {
            record: RunRecord {
                command: command.to_string(),
                config_hash: None,
                seed: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_s: 0.0,
                finished_unix: 0,
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, hash: String, seed: Option<u64>) {
        self.record.config_hash = Some(hash);
        self.record.seed = seed;
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.record.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.record.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn finish(mut self, log_path: &Path) -> Result<RunRecord> {
        self.record.wall_time_s = self.started.elapsed().as_secs_f64();
        self.record.finished_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = serde_json::to_string(&self.record).expect("record serializes");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(log_path, e))?;
        Ok(self.record)
    }
}

/// Default log location: `runs.jsonl` beside an output path.
pub fn default_log_path(output: &Path) -> PathBuf {
    let dir = if output.is_dir() {
        output.to_path_buf()
    } else {
        output.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    dir.join("runs.jsonl")
}

pub fn read_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_per_finished_command() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.bin");
        std::fs::write(&out, b"abc").unwrap();
        let log = default_log_path(&out);
        for _ in 0..2 {
            let mut r = RunLog::start("evaluate");
            r.config("h".into(), Some(4));
            r.output(&out).unwrap();
            r.finish(&log).unwrap();
        }
        let recs = read_log(&log).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(
            recs[0].outputs[&out.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(recs[1].seed, Some(4));
    }
}
