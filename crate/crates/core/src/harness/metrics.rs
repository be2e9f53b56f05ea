use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One scalar measurement. `wall_step` counts gradient steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub wall_step: u64,
    pub env_steps: u64,
    pub name: String,
    pub value: f64,
    pub seed: u64,
}

/// Appends records to a JSONL file, one object per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    seed: u64,
    last_env_steps: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path, seed: u64) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(path, file, seed, 0))
    }

    /// Opens an existing log for appending, after dropping any records past
    /// `env_steps` (written after the checkpoint being resumed).
    pub fn resume(path: &Path, seed: u64, env_steps: u64) -> Result<Self> {
        // raw lines are kept verbatim so earlier records stay byte-identical
        let mut kept = Vec::new();
        let mut last = 0;
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: MetricsRecord = serde_json::from_str(line)?;
                if rec.env_steps <= env_steps {
                    last = rec.env_steps;
                    kept.push(line.to_string());
                }
            }
        }
        let mut w = Self::create(path, seed)?;
        for line in &kept {
            w.out
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
            w.out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.last_env_steps = last;
        Ok(w)
    }

    fn wrap(path: &Path, file: File, seed: u64, last: u64) -> Self {
        MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            seed,
            last_env_steps: last,
        }
    }

    pub fn open_append(path: &Path, seed: u64) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(path, file, seed, 0))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&mut self, wall_step: u64, env_steps: u64, name: &str, value: f64) -> Result<()> {
        if env_steps < self.last_env_steps {
            return Err(Error::Config(format!(
                "metrics env_steps went backwards: {env_steps} after {}",
                self.last_env_steps
            )));
        }
        self.last_env_steps = env_steps;
        let rec = MetricsRecord {
            wall_step,
            env_steps,
            name: name.to_string(),
            value,
            seed: self.seed,
        };
        self.write_line(&rec)
    }

    fn write_line(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads and validates every record of a JSONL log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
