use std::path::Path;

use ctxlens::corpus::{self, default_buckets, LONG_DOC_WINDOW};
use ctxlens::reporting::{write_report, JsonlWriter};
use serde_json::json;

use crate::args::parse_one;
use crate::context::Run;
use crate::error::{CliError, CliResult};

pub struct SampleArgs<'a> {
    pub corpus: &'a Path,
    pub n_per_bucket: usize,
    pub doc_window: Option<&'a str>,
    pub ground_truth: bool,
    pub token_cache: Option<&'a Path>,
    pub output: Option<&'a Path>,
}

/// `long` or `LO:HI`, a half-open token-length range.
fn window(spec: &str) -> CliResult<(usize, usize)> {
    if spec == "long" {
        return Ok(LONG_DOC_WINDOW);
    }
    let (lo, hi) = spec
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("doc window `{spec}` is not LO:HI")))?;
    let (lo, hi) = (parse_one(lo, "doc window")?, parse_one(hi, "doc window")?);
    if lo >= hi {
        return Err(CliError::usage(format!("doc window `{spec}` is empty")));
    }
    Ok((lo, hi))
}

pub fn run(run: &Run, args: SampleArgs<'_>) -> CliResult<()> {
    let backend = run.backend()?;
    let doc_window = args.doc_window.map(window).transpose()?;
    let loaded = corpus::load_jsonl(args.corpus)?;
    for e in &loaded.errors {
        tracing::warn!(line = e.line, "skipping corpus line: {}", e.message);
    }
    let tokenizer_id = run.backend_label();
    let buckets = default_buckets();
    let out_path = match args.output {
        Some(p) => p.to_path_buf(),
        None => run.ensure_out()?.join("samples.jsonl"),
    };
    let mut writer = JsonlWriter::create(&out_path)?;
    let mut warnings = Vec::new();
    let mut used = 0usize;
    let mut outside = 0usize;
    for doc in &loaded.documents {
        let tokens = corpus::tokenize_cached(doc, &tokenizer_id, args.token_cache, backend.as_ref())?;
        if let Some((lo, hi)) = doc_window {
            if !(lo..hi).contains(&tokens.len()) {
                outside += 1;
                continue;
            }
        }
        used += 1;
        let sampled = corpus::sample_sequences(
            &doc.id,
            &tokens,
            args.n_per_bucket,
            &buckets,
            run.seed,
            args.ground_truth,
        )?;
        for s in &sampled.samples {
            writer.write(s)?;
        }
        warnings.extend(sampled.warnings);
    }
    if writer.written() == 0 {
        return Err(CliError::data("no samples could be drawn from the corpus"));
    }
    if args.output.is_none() {
        write_report(
            &run.out_path("sample_summary.json"),
            &json!({
                "command": "sample",
                "documents": loaded.documents.len(),
                "line_errors": loaded.errors,
                "outside_window": outside,
                "used": used,
                "samples": writer.written(),
                "warnings": warnings,
            }),
        )?;
    }
    Ok(())
}
