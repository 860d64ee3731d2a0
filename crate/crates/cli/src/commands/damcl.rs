use std::path::Path;

use ctxlens::probe::{self, mcl_histogram, Metric, PrefixGrid, ProbeError, ProbeResult};
use ctxlens::reporting::{write_report, JsonlWriter};
use serde_json::{json, Value};

use super::{grid, shares};
use crate::args::{parse_list, parse_one};
use crate::backend::truncation_name;
use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

pub fn run(run: &Run, samples: &Path) -> CliResult<()> {
    let backend = run.backend()?;
    let grid = grid(run, PrefixGrid::percentile())?;
    grid.validate()?;
    let metric: Metric = match &run.knobs.metric {
        Some(m) => parse_one(m, "metric")?,
        None => Metric::Jsd,
    };
    let epsilons: Vec<f64> = match &run.knobs.epsilon {
        Some(e) => parse_list(e, "epsilon")?,
        None => vec![0.1, 0.2],
    };
    if let Some(bad) = epsilons.iter().find(|e| !(**e > 0.0)) {
        return Err(CliError::usage(format!("epsilon must be > 0, got {bad}")));
    }
    let strategies = run.strategies()?;
    let input = io::read_samples(samples)?;
    run.ensure_out()?;

    let mut runs: Vec<Value> = Vec::new();
    for strategy in &strategies {
        for &eps in &epsilons {
            let tag = format!("{}-eps{eps}", strategy.slug());
            let mut writer = JsonlWriter::create(&run.out_path(&format!("damcl-{tag}.jsonl")))?;
            let mut results: Vec<ProbeResult> = Vec::new();
            let mut skipped = Vec::new();
            run.for_each_ordered(
                &input,
                |s| probe::damcl(&s.tokens, *strategy, metric, eps, &grid, backend.as_ref()),
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
            let hist = if results.is_empty() { None } else { Some(mcl_histogram(&results)?) };
            io::write_text(
                &run.out_path(&format!("histogram-{tag}.csv")),
                &hist.as_ref().map(|h| h.histogram.to_csv()).unwrap_or_else(|| "ell,count\n".into()),
            )?;
            let mut entry = json!({
                "strategy": strategy,
                "epsilon": eps,
                "probed": results.len(),
                "skipped": skipped,
                "b_hat": hist.as_ref().and_then(|h| h.b_hat()),
                "fit": hist.as_ref().and_then(|h| h.fit),
            });
            entry.as_object_mut().expect("object").extend(shares(run, &results)?);
            runs.push(entry);
        }
    }

    write_report(
        &run.out_path("summary.json"),
        &json!({
            "command": "damcl",
            "backend": run.backend_label(),
            "truncation": truncation_name(backend.as_ref()),
            "grid": grid,
            "metric": metric.to_string(),
            "input": input.len(),
            "runs": runs,
        }),
    )?;
    Ok(())
}
