use std::path::Path;

use ctxlens::probe::{self, mcl_histogram, PrefixGrid, ProbeError, ProbeResult, Rejection, DEFAULT_DELTA};
use ctxlens::reporting::{write_report, JsonlWriter};
use serde_json::json;

use super::{grid, shares};
use crate::backend::truncation_name;
use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

pub fn run(run: &Run, samples: &Path) -> CliResult<()> {
    let backend = run.backend()?;
    let grid = grid(run, PrefixGrid::short_docs())?;
    grid.validate()?;
    let delta = run.knobs.delta.unwrap_or(DEFAULT_DELTA);
    if !(0.0..=1.0).contains(&delta) {
        return Err(CliError::usage(format!("delta {delta} outside [0, 1]")));
    }
    let filter = run.knobs.filter.unwrap_or(true);
    let input = io::read_samples(samples)?;
    let total = input.len();

    let mut kept = Vec::new();
    let mut dropped = 0usize;
    let mut rejected: Vec<Rejection> = Vec::new();
    if filter {
        run.for_each_ordered(
            &input,
            |s| probe::filter_confident_correct(std::slice::from_ref(s), delta, backend.as_ref()),
            |_, outcome| {
                let o = outcome?;
                kept.extend(o.kept);
                dropped += o.dropped;
                rejected.extend(o.rejected);
                Ok(())
            },
        )?;
    } else {
        for s in input {
            if s.next_token.is_some() {
                kept.push(s);
            } else {
                rejected.push(Rejection {
                    seq_id: s.seq_id,
                    reason: "no ground-truth next token".into(),
                });
            }
        }
    }

    run.ensure_out()?;
    let mut writer = JsonlWriter::create(&run.out_path("probes.jsonl"))?;
    let mut results: Vec<ProbeResult> = Vec::new();
    let mut skipped = Vec::new();
    run.for_each_ordered(
        &kept,
        |s| {
            let t = s.next_token.expect("kept samples carry a next token");
            probe::mcl(&s.tokens, t, delta, &grid, backend.as_ref())
        },
        |s, r| {
            match r {
                Ok(r) => {
                    writer.write(&r.record(&s.seq_id))?;
                    results.push(r);
                }
                Err(ProbeError::Backend { source, partial }) => {
                    writer.write(&json!({
                        "seq_id": s.seq_id,
                        "resolved": false,
                        "error": source.to_string(),
                        "trace": partial,
                    }))?;
                    return Err(CliError::Backend(source.to_string()));
                }
                Err(e) => skipped.push(json!({"seq_id": s.seq_id, "reason": e.to_string()})),
            }
            Ok(())
        },
    )?;

    let resolved: Vec<ProbeResult> = results.iter().filter(|r| r.is_resolved()).cloned().collect();
    let hist = if resolved.is_empty() { None } else { Some(mcl_histogram(&resolved)?) };
    io::write_text(
        &run.out_path("histogram.csv"),
        &hist.as_ref().map(|h| h.histogram.to_csv()).unwrap_or_else(|| "ell,count\n".into()),
    )?;

    let mut summary = json!({
        "command": "mcl",
        "backend": run.backend_label(),
        "truncation": truncation_name(backend.as_ref()),
        "grid": grid,
        "delta": delta,
        "filter": filter,
        "counts": {
            "input": total,
            "kept": kept.len(),
            "dropped": dropped,
            "rejected": rejected.len(),
            "probed": results.len(),
            "resolved": resolved.len(),
            "unresolved": results.len() - resolved.len(),
            "skipped": skipped.len(),
        },
        "b_hat": hist.as_ref().and_then(|h| h.b_hat()),
        "fit": hist.as_ref().and_then(|h| h.fit),
        "skipped": skipped,
        "rejected": rejected,
    });
    summary.as_object_mut().expect("object").extend(shares(run, &results)?);
    write_report(&run.out_path("summary.json"), &summary)?;
    tracing::info!(resolved = resolved.len(), total, "mcl finished");
    Ok(())
}
