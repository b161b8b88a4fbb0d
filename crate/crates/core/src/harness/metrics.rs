//! Line-delimited JSON metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::LossBreakdown;

/// One record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    pub k: Vec<usize>,
    pub mean_score: Vec<f64>,
    /// Zero unless wall-clock recording is switched on.
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub trait MetricsSink {
    fn record(&mut self, record: MetricsRecord) -> Result<()>;

    /// Called at every epoch boundary.
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: MetricsRecord) -> Result<()> {
        self.push(record);
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends records to a `.jsonl` file.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(&record).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads every complete line; a torn final line is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(Error::Input(format!("metrics line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}
