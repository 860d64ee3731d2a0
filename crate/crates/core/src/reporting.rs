//! Aggregation and persistence of run artifacts.
//!
//! Every JSON artifact written through [`write_report`] carries a
//! `"schema"` field set to [`SCHEMA_VERSION`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detection::Label;
use crate::probe::ProbeResult;

pub const SCHEMA_VERSION: &str = "ctxlens/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty input")]
    Empty,
    #[error("input contains unresolved probe results")]
    Unresolved,
    #[error("length mismatch: {left} predictions vs {right} oracle labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Counts per distinct value, in ascending value order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub points: Vec<usize>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn from_values(values: &[usize]) -> Self {
        let mut bins: BTreeMap<usize, u64> = BTreeMap::new();
        for &v in values {
            *bins.entry(v).or_default() += 1;
        }
        Self {
            points: bins.keys().copied().collect(),
            counts: bins.values().copied().collect(),
            total: values.len() as u64,
        }
    }

    /// `ell,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ell,count\n");
        for (p, c) in self.points.iter().zip(&self.counts) {
            out.push_str(&format!("{p},{c}\n"));
        }
        out
    }
}

/// Binary confusion counts with `long` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }
}

/// Fraction of results whose resolved length is at most `cutoff`.
pub fn aggregate_share(results: &[ProbeResult], cutoff: usize) -> Result<f64, ReportError> {
    if results.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut hits = 0usize;
    for r in results {
        match r.resolved_length {
            Some(ell) if ell <= cutoff => hits += 1,
            Some(_) => {}
            None => return Err(ReportError::Unresolved),
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub fn confusion(preds: &[Label], oracles: &[Label]) -> Result<ConfusionMatrix, ReportError> {
    if preds.len() != oracles.len() {
        return Err(ReportError::LengthMismatch {
            left: preds.len(),
            right: oracles.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (p, o) in preds.iter().zip(oracles) {
        match (p, o) {
            (Label::Long, Label::Long) => m.tp += 1,
            (Label::Long, Label::Short) => m.fp += 1,
            (Label::Short, Label::Short) => m.tn += 1,
            (Label::Short, Label::Long) => m.fn_ += 1,
        }
    }
    Ok(m)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Serializes `payload` as pretty JSON with the schema field added and
/// writes it atomically. Non-object payloads are wrapped as `{"data": …}`.
pub fn write_report<T: Serialize + ?Sized>(path: &Path, payload: &T) -> Result<(), ReportError> {
    let value = with_schema(serde_json::to_value(payload)?);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn with_schema(value: Value) -> Value {
    let mut obj = match value {
        Value::Object(map) => map,
        other => {
            let mut map = serde_json::Map::new();
            map.insert("data".into(), other);
            map
        }
    };
    obj.insert("schema".into(), Value::String(SCHEMA_VERSION.into()));
    Value::Object(obj)
}

pub fn read_report(path: &Path) -> Result<Value, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Append-only JSON-lines writer that flushes after every record, so an
/// interrupted run leaves only complete lines behind.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    written: usize,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, ReportError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            written: 0,
        })
    }

    pub fn write<T: Serialize + ?Sized>(&mut self, record: &T) -> Result<(), ReportError> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.out.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }
}
