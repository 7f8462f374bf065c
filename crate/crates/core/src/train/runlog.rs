//! JSON-lines training logs.
//!
//! `runlog.jsonl` holds only values that are a pure function of the config, so
//! two identical runs write identical bytes. Wall-clock times go to the
//! separate `timing.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub wall_secs: f64,
}

pub struct RunLog {
    path: PathBuf,
    file: File,
    last_step: Option<usize>,
}

impl RunLog {
    /// Opens `path` for appending, keeping existing records up to and including `keep_through`
    /// (all of them when `None`) and discarding any later ones.
    pub fn open(path: &Path, keep_through: Option<usize>) -> Result<Self> {
        let existing = if path.exists() { read_records::<StepRecord>(path)? } else { Vec::new() };
        let kept: Vec<StepRecord> = existing.into_iter().filter(|r| keep_through.is_none_or(|k| r.step <= k)).collect();
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))?;
        for r in &kept {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serialises")).map_err(|e| Error::io(path, e))?;
        }
        Ok(RunLog { path: path.to_path_buf(), file, last_step: kept.last().map(|r| r.step) })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step <= s) {
            return Err(Error::Validation(format!("run log step {} does not increase past {:?}", r.step, self.last_step)));
        }
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(r.step);
        Ok(())
    }
}

/// Appends one JSON line to `path`.
pub fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value).expect("record serialises")).map_err(|e| Error::io(path, e))
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                json_path: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
