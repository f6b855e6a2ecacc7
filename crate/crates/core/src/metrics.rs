//! Append-only metrics log in CSV form: `step,metric,value` with a header row.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["step", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(step: u64, metric: impl Into<String>, value: f64) -> Self {
        Self { step, metric: metric.into(), value }
    }
}

/// In-memory history that can be flushed to a CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, step: u64, metric: &str, value: f64) {
        self.records.push(MetricRecord::new(step, metric, value));
    }

    /// Values of one metric in step order.
    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.records.iter().filter(|r| r.metric == metric).map(|r| (r.step, r.value)).collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Appends records to `path`, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(HEADER).map_err(csv_err)?;
        }
        for r in &self.records {
            w.write_record([r.step.to_string(), r.metric.clone(), format!("{}", r.value)]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rd.headers().map_err(csv_err)?.clone();
        let missing: Vec<&str> = HEADER.iter().copied().filter(|h| !headers.iter().any(|x| x == *h)).collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!("{} is missing columns: {}", path.display(), missing.join(", "))));
        }
        let mut records = Vec::new();
        for row in rd.deserialize::<MetricRecord>() {
            records.push(row.map_err(csv_err)?);
        }
        Ok(Self { records })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut a = MetricLog::default();
        a.push(0, "loss", 1.5);
        a.push(100, "loss", 0.25);
        a.append_csv(&path).unwrap();
        let mut b = MetricLog::default();
        b.push(200, "acc", 0.125);
        b.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,metric,value\n"));
        assert_eq!(text.matches("step,metric").count(), 1);
        let back = MetricLog::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.series("loss"), vec![(0, 1.5), (100, 0.25)]);
        assert_eq!(back.last("acc"), Some(0.125));
    }

    #[test]
    fn missing_columns_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "step,name\n1,x\n").unwrap();
        let err = MetricLog::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("metric") && err.contains("value"), "{err}");
    }
}
