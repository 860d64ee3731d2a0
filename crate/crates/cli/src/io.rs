use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ctxlens::corpus::SequenceSample;
use serde::de::DeserializeOwned;

use crate::error::{CliError, CliResult};

/// Parses every non-blank line; any malformed line fails the whole read.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{} holds no records", path.display())));
    }
    Ok(rows)
}

/// Samples sorted by `seq_id`, which must be unique.
pub fn read_samples(path: &Path) -> CliResult<Vec<SequenceSample>> {
    let mut samples: Vec<SequenceSample> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(s.seq_id.as_str()) {
            return Err(CliError::data(format!("duplicate seq_id `{}`", s.seq_id)));
        }
    }
    samples.sort_by(|a, b| a.seq_id.cmp(&b.seq_id));
    Ok(samples)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(ctxlens::reporting::write_atomic(path, text.as_bytes())?)
}
