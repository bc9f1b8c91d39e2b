//! Append-only CSV metrics: `unit,epoch,loss,train_acc,test_acc,seconds`.
//!
//! Rows are appended and flushed one unit at a time; earlier rows are never
//! rewritten. `test_acc` is empty on epochs without evaluation.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scion_core::distill::TrainRecord;

pub const FILE_NAME: &str = "metrics.csv";
pub const HEADER: [&str; 6] = ["unit", "epoch", "loss", "train_acc", "test_acc", "seconds"];

#[derive(Debug, Clone)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn in_dir(run_dir: &Path) -> Self {
        Self { path: run_dir.join(FILE_NAME) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[TrainRecord]) -> Result<()> {
        let fresh = fs::metadata(&self.path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening {}", self.path.display()))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(HEADER)?;
        }
        for r in records {
            w.write_record([
                r.unit.clone(),
                r.epoch.to_string(),
                r.loss.to_string(),
                r.train_acc.to_string(),
                r.test_acc.map(|a| a.to_string()).unwrap_or_default(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        let mut file = w.into_inner().map_err(|e| e.into_error())?;
        file.flush()?;
        file.sync_data()?;
        Ok(())
    }

    pub fn read(&self) -> Result<Vec<TrainRecord>> {
        read_csv(&self.path)
    }

    /// Units with at least one row.
    pub fn units(&self) -> Result<BTreeSet<String>> {
        if !self.path.exists() {
            return Ok(BTreeSet::new());
        }
        Ok(self.read()?.into_iter().map(|r| r.unit).collect())
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    if rd.headers()?.iter().ne(HEADER) {
        bail!("{}: expected header {}", path.display(), HEADER.join(","));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let field = |j: usize| row.get(j).unwrap_or("");
        let parse = |j: usize| -> Result<f64> {
            field(j)
                .parse()
                .with_context(|| format!("{}: row {}: bad {}", path.display(), i + 2, HEADER[j]))
        };
        out.push(TrainRecord {
            unit: field(0).to_owned(),
            epoch: field(1)
                .parse()
                .with_context(|| format!("{}: row {}: bad epoch", path.display(), i + 2))?,
            loss: parse(2)?,
            train_acc: parse(3)?,
            test_acc: if field(4).is_empty() { None } else { Some(parse(4)?) },
            seconds: parse(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(unit: &str, epoch: usize, test: Option<f64>) -> TrainRecord {
        TrainRecord {
            unit: unit.into(),
            epoch,
            loss: 0.1 / epoch as f64,
            train_acc: 0.5,
            test_acc: test,
            seconds: 1.25,
        }
    }

    #[test]
    fn appends_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = MetricsLog::in_dir(dir.path());
        log.append(&[rec("block1", 1, None), rec("block1", 2, Some(0.75))]).unwrap();
        log.append(&[rec("depth2", 1, Some(0.5))]).unwrap();
        let back = log.read().unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[1].same_outcome(&rec("block1", 2, Some(0.75))));
        assert_eq!(back[0].test_acc, None);
        assert_eq!(log.units().unwrap().into_iter().collect::<Vec<_>>(), ["block1", "depth2"]);
        let text = fs::read_to_string(log.path()).unwrap();
        assert!(text.starts_with("unit,epoch,loss,train_acc,test_acc,seconds\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
