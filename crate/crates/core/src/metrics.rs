//! JSON-lines metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub ema_m: f64,
    pub loss: f64,
    pub loss_infonce: f64,
    pub loss_ressl: f64,
    pub loss_ceil: f64,
    pub queue_fill: usize,
    pub wall_ms: u64,
}

/// First line of every stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub header: bool,
    pub version: String,
    pub threads: usize,
    pub parallel: bool,
    pub objective: String,
    pub seed: u64,
    pub resumed_from_step: Option<u64>,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
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

/// Step records of a metrics file, skipping the header and other record kinds.
pub fn read_steps(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.get("step").is_some() && v.get("loss").is_some() {
            out.push(serde_json::from_value(v).map_err(|e| Error::invalid(e.to_string()))?);
        }
    }
    Ok(out)
}
