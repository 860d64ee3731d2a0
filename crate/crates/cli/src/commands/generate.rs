use std::collections::BTreeMap;
use std::path::Path;

use ctxlens::boosting::{self, BoostConfig, GenerationConfig, Method, DEFAULT_ALPHA, DEFAULT_EPSILON};
use ctxlens::detection::{DEFAULT_GAMMA, DEFAULT_SHORT_LEN};
use ctxlens::oracle::{Oracle, OracleError};
use ctxlens::reporting::{write_report, JsonlWriter};
use ctxlens::seed;
use ctxlens::textmetrics::{self, ScoredAnswer};
use ctxlens::TokenId;
use serde::Deserialize;
use serde_json::json;

use crate::args::{parse_list, parse_one};
use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

const DEFAULT_SAMPLES: usize = 5;
const DEFAULT_MAX_NEW: usize = 32;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRow {
    id: String,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<TokenId>>,
    #[serde(default)]
    gold: Option<String>,
}

struct Prompt {
    id: String,
    tokens: Vec<TokenId>,
    gold: Option<String>,
    gold_tokens: Option<Vec<TokenId>>,
}

struct Job<'a> {
    prompt: &'a Prompt,
    method: Method,
    sample: usize,
}

fn prepare(row: PromptRow, backend: &dyn Oracle) -> CliResult<Prompt> {
    let tokens = match (row.tokens, &row.prompt) {
        (Some(t), _) => t,
        (None, Some(text)) => backend.tokenize(text).map_err(|e| match e {
            OracleError::Unsupported(_) => {
                CliError::usage(format!("prompt `{}`: backend cannot tokenize text; pass tokens", row.id))
            }
            other => other.into(),
        })?,
        (None, None) => return Err(CliError::data(format!("prompt `{}` has neither prompt nor tokens", row.id))),
    };
    let gold_tokens = row.gold.as_deref().and_then(|g| backend.tokenize(g).ok());
    Ok(Prompt {
        id: row.id,
        tokens,
        gold: row.gold,
        gold_tokens,
    })
}

pub fn run(run: &Run, prompts: &Path) -> CliResult<()> {
    let backend = run.backend()?;
    let methods: Vec<Method> = match &run.knobs.method {
        Some(m) => parse_list(m, "method")?,
        None => vec![Method::Vanilla],
    };
    if methods.contains(&Method::Taboo) && run.knobs.lambda.is_none() {
        return Err(CliError::usage("taboo needs --lambda"));
    }
    let short_len = match &run.knobs.short_len {
        Some(s) => parse_one(s, "short_len")?,
        None => DEFAULT_SHORT_LEN,
    };
    let cfg = GenerationConfig {
        boost: BoostConfig {
            gamma: run.knobs.gamma.unwrap_or(DEFAULT_GAMMA),
            epsilon: run.knobs.boost_epsilon.unwrap_or(DEFAULT_EPSILON),
            lambda: run.knobs.lambda.unwrap_or(1.0),
            strategy: run.strategy()?,
            short_len,
        },
        alpha: run.knobs.alpha.unwrap_or(DEFAULT_ALPHA),
    };
    cfg.boost.validate()?;
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(CliError::usage(format!("alpha must be finite and >= 0, got {}", cfg.alpha)));
    }
    let n_samples = run.knobs.n_samples.unwrap_or(DEFAULT_SAMPLES);
    let max_new = run.knobs.max_new.unwrap_or(DEFAULT_MAX_NEW);
    if n_samples == 0 || max_new == 0 {
        return Err(CliError::usage("--n-samples and --max-new must be >= 1"));
    }

    let rows: Vec<PromptRow> = io::read_jsonl(prompts)?;
    let prompts = rows
        .into_iter()
        .map(|r| prepare(r, backend.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for p in &prompts {
        for &method in &methods {
            for sample in 0..n_samples {
                jobs.push(Job { prompt: p, method, sample });
            }
        }
    }

    run.ensure_out()?;
    let mut writer = JsonlWriter::create(&run.out_path("generations.jsonl"))?;
    let mut reports = JsonlWriter::create(&run.out_path("boost_reports.jsonl"))?;
    // method -> prompt id -> scores of each sample
    let mut scores: BTreeMap<String, BTreeMap<String, Vec<ScoredAnswer>>> = BTreeMap::new();
    let mut errors = 0usize;
    run.for_each_ordered(
        &jobs,
        |job| {
            let s = seed::derive(seed::derive_str(run.seed, &job.prompt.id), job.sample as u64);
            let g = boosting::generate(
                &job.prompt.tokens,
                max_new,
                job.method,
                &cfg,
                s,
                backend.as_ref(),
                job.prompt.gold_tokens.as_deref(),
            );
            (s, g)
        },
        |job, (s, g)| {
            let g = g?;
            let text = backend.detokenize(&g.tokens).ok();
            let score = match (&text, &job.prompt.gold) {
                (Some(t), Some(gold)) => Some(textmetrics::score_answer(t, gold)),
                _ => None,
            };
            if let Some(sc) = score {
                scores
                    .entry(job.method.to_string())
                    .or_default()
                    .entry(job.prompt.id.clone())
                    .or_default()
                    .push(sc);
            }
            errors += usize::from(g.error.is_some());
            let mut record = json!({
                "id": job.prompt.id,
                "method": job.method,
                "sample": job.sample,
                "seed": s,
                "tokens": g.tokens,
                "text": text,
                "config": {
                    "strategy": cfg.boost.strategy,
                    "max_new": max_new,
                    "lambda": cfg.boost.lambda,
                    "gamma": cfg.boost.gamma,
                    "epsilon": cfg.boost.epsilon,
                    "alpha": cfg.alpha,
                    "short_len": cfg.boost.short_len,
                },
                "steps": g.steps.len(),
                "stopped_on_eos": g.stopped_on_eos,
            });
            let obj = record.as_object_mut().expect("object");
            if let Some(e) = &g.error {
                obj.insert("error".into(), json!(e));
            }
            if let Some(sc) = score {
                obj.insert("scores".into(), json!(sc.percent()));
            }
            writer.write(&record)?;
            reports.write(&json!({
                "id": job.prompt.id,
                "method": job.method,
                "sample": job.sample,
                "steps": g.steps,
            }))?;
            Ok(())
        },
    )?;

    if !scores.is_empty() {
        let per_method: BTreeMap<&String, _> = scores
            .iter()
            .map(|(m, by_prompt)| {
                let groups: Vec<Vec<ScoredAnswer>> = by_prompt.values().cloned().collect();
                let s = textmetrics::summarize(&groups);
                (
                    m,
                    json!({
                        "average": s.average.percent(),
                        "best_per_example": s.best_per_example.percent(),
                        "examples": s.examples,
                        "answers": s.answers,
                    }),
                )
            })
            .collect();
        write_report(&run.out_path("scores.json"), &json!({ "methods": per_method }))?;
    }
    if errors > 0 {
        return Err(CliError::Backend(format!("{errors} generations stopped on backend errors")));
    }
    Ok(())
}
