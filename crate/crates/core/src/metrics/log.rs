//! Append-only metrics CSV.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] =
    ["step", "loss_task", "loss_group", "homogeneity", "diversity", "sc", "di", "ppl", "acc"];

/// One logged row. Undefined compactness values are written as `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_task: f64,
    pub loss_group: f64,
    pub homogeneity: f64,
    pub diversity: f64,
    pub sc: f64,
    pub di: f64,
    pub ppl: f64,
    pub acc: f64,
}

pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header when the file is new
    /// or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let writer = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
        Ok(Self { path: path.to_path_buf(), writer })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::malformed(path, format!("{other:?}")),
    })?;
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::malformed(path, format!("unexpected header {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(|e| Error::malformed(path, e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            loss_task: 1.5,
            loss_group: -0.25,
            homogeneity: -0.5,
            diversity: 0.1,
            sc: f64::NAN,
            di: f64::INFINITY,
            ppl: 4.5,
            acc: 0.75,
        }
    }

    #[test]
    fn header_written_once_and_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        MetricsLog::open(&p).unwrap().append(&row(1)).unwrap();
        MetricsLog::open(&p).unwrap().append(&row(2)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,loss_task,loss_group,homogeneity,diversity,sc,di,ppl,acc\n"));
        assert_eq!(text.matches("step").count(), 1);
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].step, 2);
        assert!(rows[0].sc.is_nan());
        assert_eq!(rows[0].di, f64::INFINITY);
    }

    #[test]
    fn wrong_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Malformed { .. })));
    }
}
