use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::Stage;
use crate::{Error, Result};

/// One optimizer step. Serialized as a CSV row
/// `step,stage,layer,lr,loss,wall_ms` with an empty `layer` outside PKT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub layer: Option<usize>,
    pub lr: f64,
    pub loss: f64,
    /// Milliseconds since the loop started in this process.
    pub wall_ms: u64,
}

/// In-memory loss history, optionally mirrored to a CSV file as it grows.
#[derive(Default)]
pub struct LossLog {
    records: Vec<LossRecord>,
    sink: Option<csv::Writer<File>>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirrors new records to `path`, appending when it already has rows.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let existing = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let sink = csv::WriterBuilder::new()
            .has_headers(!existing)
            .from_writer(file);
        Ok(LossLog {
            records: Vec::new(),
            sink: Some(sink),
        })
    }

    pub fn push(&mut self, record: LossRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.serialize(&record).map_err(csv_err)?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rec = |step, layer| LossRecord {
            step,
            stage: Stage::Pkt,
            layer,
            lr: 1e-3,
            loss: 0.5,
            wall_ms: 7,
        };
        let mut log = LossLog::to_file(&path).unwrap();
        log.push(rec(0, Some(1))).unwrap();
        drop(log);
        let mut log = LossLog::to_file(&path).unwrap();
        log.push(rec(1, None)).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,stage,layer,lr,loss,wall_ms\n"));
        assert_eq!(
            LossLog::read_csv(&path).unwrap(),
            vec![rec(0, Some(1)), rec(1, None)]
        );
    }
}
