use std::collections::BTreeMap;
use std::path::Path;

use ctxlens::reporting::{write_report, JsonlWriter};
use ctxlens::textmetrics::{self, ScoredAnswer};
use serde::Deserialize;
use serde_json::json;

use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Gold {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
struct Row {
    #[serde(default)]
    id: Option<String>,
    pred: String,
    gold: Gold,
}

/// Best score over the references, per metric.
fn best(pred: &str, gold: &Gold) -> CliResult<ScoredAnswer> {
    let refs: Vec<&String> = match gold {
        Gold::One(g) => vec![g],
        Gold::Many(gs) => gs.iter().collect(),
    };
    let mut it = refs.iter().map(|g| textmetrics::score_answer(pred, g));
    let first = it.next().ok_or_else(|| CliError::data("empty gold list"))?;
    Ok(it.fold(first, |a, b| ScoredAnswer {
        f1: a.f1.max(b.f1),
        bleu: a.bleu.max(b.bleu),
        rouge_l: a.rouge_l.max(b.rouge_l),
    }))
}

pub fn run(run: &Run, input: &Path) -> CliResult<()> {
    let rows: Vec<Row> = io::read_jsonl(input)?;
    run.ensure_out()?;
    let mut writer = JsonlWriter::create(&run.out_path("scores.jsonl"))?;
    let mut groups: BTreeMap<String, Vec<ScoredAnswer>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let s = best(&row.pred, &row.gold)?;
        let key = row.id.clone().unwrap_or_else(|| format!("#{i}"));
        writer.write(&json!({"id": row.id, "line": i + 1, "scores": s.percent()}))?;
        groups.entry(key).or_default().push(s);
    }
    let groups: Vec<Vec<ScoredAnswer>> = groups.into_values().collect();
    let summary = textmetrics::summarize(&groups);
    write_report(
        &run.out_path("summary.json"),
        &json!({
            "command": "score",
            "average": summary.average.percent(),
            "best_per_example": summary.best_per_example.percent(),
            "examples": summary.examples,
            "answers": summary.answers,
        }),
    )?;
    Ok(())
}
