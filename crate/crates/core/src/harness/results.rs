//! Line-delimited JSON results store.
//!
//! Every append takes a lockfile, rewrites the whole store into a temporary
//! file and renames it over the old one, so readers never observe a partial
//! row and a killed writer leaves the previous store intact.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::Mode;
use crate::error::{io_err, Error, Result};

pub const RESULTS_FILE: &str = "results.jsonl";
const LOCK_FILE: &str = "results.lock";
const LOCK_TIMEOUT: Duration = Duration::from_secs(60);

/// What a row measures. The two baselines share the `baseline` trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    LowerLimit,
    Dbacs,
    OfflinePl,
    OnlinePl,
    AdaMatch,
    Oracle,
}

impl RowKind {
    /// Table row order.
    pub const ORDER: [RowKind; 6] = [
        RowKind::LowerLimit,
        RowKind::Dbacs,
        RowKind::OfflinePl,
        RowKind::OnlinePl,
        RowKind::AdaMatch,
        RowKind::Oracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RowKind::LowerLimit => "Lower limit",
            RowKind::Dbacs => "DBACS",
            RowKind::OfflinePl => "Offline PL",
            RowKind::OnlinePl => "Online PL",
            RowKind::AdaMatch => "AdaMatch",
            RowKind::Oracle => "Oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub mode: Mode,
    pub source: u8,
    pub target: u8,
    pub target_label_fraction: f64,
    pub method: RowKind,
    pub arch: String,
    pub seed: u64,
    /// `None` when training failed; see `error`.
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub runtime_seconds: f64,
    pub config_hash: String,
    /// True when test images were passed through the aligner first.
    pub used_aligner: bool,
    /// Checksum of the evaluated classifier.
    pub checksum: Option<String>,
    pub error: Option<String>,
}

/// Identity of a row for duplicate detection.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub mode: Mode,
    pub source: u8,
    pub target: u8,
    pub method: RowKind,
    pub arch: String,
    pub seed: u64,
    pub config_hash: String,
}

impl ResultsRow {
    pub fn key(&self) -> RowKey {
        RowKey {
            mode: self.mode,
            source: self.source,
            target: self.target,
            method: self.method,
            arch: self.arch.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Results(format!("accuracy {a} outside [0, 1]")));
            }
        } else if self.error.is_none() {
            return Err(Error::Results("row without accuracy must carry an error".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResultsStore {
    dir: PathBuf,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Lock(path)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_TIMEOUT {
                        return Err(Error::Results(format!(
                            "timed out waiting for {}; remove it if no writer is running",
                            path.display()
                        )));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl ResultsStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(ResultsStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(RESULTS_FILE)
    }

    pub fn rows(&self) -> Result<Vec<ResultsRow>> {
        read_rows(&self.path())
    }

    pub fn contains(&self, key: &RowKey) -> Result<bool> {
        Ok(self.rows()?.iter().any(|r| &r.key() == key))
    }

    /// Appends `row`. A row with the same key is a [`Error::DuplicateRow`]
    /// unless `force`, in which case it replaces the old one.
    pub fn append(&self, row: &ResultsRow, force: bool) -> Result<()> {
        row.validate()?;
        let _lock = Lock::acquire(&self.dir)?;
        let mut rows = self.rows()?;
        let key = row.key();
        if let Some(pos) = rows.iter().position(|r| r.key() == key) {
            if !force {
                return Err(Error::DuplicateRow(format!(
                    "{} {}->{} {} {} seed {} (config {})",
                    row.mode,
                    row.source,
                    row.target,
                    row.method.label(),
                    row.arch,
                    row.seed,
                    &row.config_hash[..row.config_hash.len().min(12)]
                )));
            }
            rows.remove(pos);
        }
        rows.push(row.clone());
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Results(e.to_string()))?);
            text.push('\n');
        }
        let path = self.path();
        let tmp = self.dir.join(format!("{RESULTS_FILE}.{}.tmp", std::process::id()));
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

/// Parses a store file; a missing file is an empty store.
pub fn read_rows(path: &Path) -> Result<Vec<ResultsRow>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Results(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}
