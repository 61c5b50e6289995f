use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub run_id: String,
    pub step: u64,
    pub loss_name: String,
    pub value: f64,
    pub lr: f64,
    pub t_over_t: f64,
}

/// Collects log records in memory and optionally streams them as JSONL.
pub struct TrainLog {
    run_id: String,
    sink: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl TrainLog {
    /// In-memory log only.
    pub fn memory(run_id: impl Into<String>) -> Self {
        TrainLog { run_id: run_id.into(), sink: None, records: Vec::new() }
    }

    /// Appends to `path` (created with parent directories) as well.
    pub fn to_file(run_id: impl Into<String>, path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(TrainLog { run_id: run_id.into(), sink: Some(BufWriter::new(f)), records: Vec::new() })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn record(&mut self, step: u64, loss_name: &str, value: f64, lr: f64, t_over_t: f64) {
        let rec = LogRecord {
            run_id: self.run_id.clone(),
            step,
            loss_name: loss_name.to_string(),
            value,
            lr,
            t_over_t,
        };
        if let Some(w) = &mut self.sink {
            // a failing log sink must not abort training
            if let Ok(line) = serde_json::to_string(&rec) {
                let _ = writeln!(w, "{line}");
            }
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn values(&self, loss_name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.loss_name == loss_name).map(|r| r.value).collect()
    }

    pub fn flush(&mut self) {
        if let Some(w) = &mut self.sink {
            let _ = w.flush();
        }
    }
}

impl Drop for TrainLog {
    fn drop(&mut self) {
        self.flush();
    }
}
