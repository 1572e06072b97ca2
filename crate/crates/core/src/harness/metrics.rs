use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const METRICS_HEADER: &str = "iteration,loss,perplexity,rho1,rho2,lr,sim_time_s,affected_ranks\n";

/// One row of `metrics.csv`. The loss is the mean of the per-rank losses
/// summed in ascending rank order; absent probe values are empty fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub loss: f64,
    pub perplexity: f64,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub lr: f64,
    pub sim_time_s: f64,
    pub affected_ranks: usize,
    /// Size of the attention-group active set of each layer.
    #[serde(skip)]
    pub active_mha_ranks: Vec<usize>,
}

/// Appends rows to `metrics.csv.partial` and renames it into place on
/// `finish`, so readers never see a half-written file under the final name.
pub struct MetricsWriter {
    tmp: PathBuf,
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let tmp = dir.join("metrics.csv.partial");
        let mut file = BufWriter::new(File::create(&tmp)?);
        file.write_all(METRICS_HEADER.as_bytes())?;
        let out = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(MetricsWriter { tmp, path, out })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.out.serialize(rec)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        drop(self.out);
        fs::rename(&self.tmp, &self.path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_header_and_leave_absent_fields_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.write(&MetricsRecord {
            iteration: 0,
            loss: 2.0,
            perplexity: 2f64.exp(),
            rho1: None,
            rho2: Some(0.25),
            lr: 0.0,
            sim_time_s: 1.5,
            affected_ranks: 1,
            active_mha_ranks: vec![3],
        })
        .unwrap();
        assert!(!dir.path().join("metrics.csv").exists());
        w.finish().unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(format!("{}\n", lines.next().unwrap()), METRICS_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,2.0,"));
        assert!(row.contains(",,0.25,"));
        assert_eq!(row.split(',').count(), 8);
    }
}
