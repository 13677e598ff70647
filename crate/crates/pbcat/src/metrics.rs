//! JSON-lines metrics stream.
//!
//! One object per optimizer step, in step order:
//!
//! ```json
//! {"step":0,"loss":1.23,"mode":"pbcat","max_abs_delta_g":0.0156,"max_abs_delta_p":0.0313}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pbcat_core::trainer::StepMetrics;

use crate::error::{Error, Result};

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m).map_err(|e| Error::json(&self.path, e))?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbcat_core::trainer::TrainMode;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let rows: Vec<StepMetrics> = (0..3)
            .map(|i| StepMetrics {
                step: i,
                loss: 1.0 / (i + 1) as f64,
                mode: TrainMode::Pbcat,
                max_abs_delta_g: 0.01,
                max_abs_delta_p: 0.2,
            })
            .collect();
        let mut w = MetricsWriter::create(&p).unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        w.flush().unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"step\":0,\"loss\":1.0,\"mode\":\"pbcat\""));
    }
}
