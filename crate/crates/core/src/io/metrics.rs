//! Line-delimited metric streams.
//!
//! The first line is a header; each following line is one JSON record.
//! Records carry no wall-clock data so identical runs give identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const METRICS_FORMAT: &str = "mavil-metrics";
pub const METRICS_VERSION: u32 = 1;

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (or truncates) `path` and writes the header line.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.record(&serde_json::json!({"format": METRICS_FORMAT, "version": METRICS_VERSION}))?;
        Ok(w)
    }

    /// Opens an existing stream for appending after checking its header.
    pub fn append(path: &Path) -> Result<Self> {
        read_records(path)?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn record<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parses a metric stream, returning every record after the header.
pub fn read_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header["format"] != METRICS_FORMAT || header["version"] != METRICS_VERSION {
        return Err(Error::format(
            path,
            format!("expected {METRICS_FORMAT} version {METRICS_VERSION}, found {header}"),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
