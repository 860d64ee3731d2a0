use std::path::Path;

use ctxlens::corpus::SequenceSample;
use ctxlens::detection::{
    self, DetectionError, Label, LsdsConfig, OracleKind, ShortLen, DEFAULT_GAMMA, DEFAULT_TAU,
};
use ctxlens::oracle::Oracle;
use ctxlens::probe::{PrefixGrid, DEFAULT_DELTA};
use ctxlens::reporting::{confusion, write_report, JsonlWriter};
use serde_json::json;

use super::grid;
use crate::args::{parse_list, parse_one};
use crate::backend::truncation_name;
use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

struct Scored {
    lsds: f64,
    pred: Label,
    oracle: Label,
}

fn oracle_label(
    s: &SequenceSample,
    kind: OracleKind,
    delta: f64,
    grid: &PrefixGrid,
    backend: &dyn Oracle,
) -> Result<Label, DetectionError> {
    let target = || {
        s.next_token
            .ok_or_else(|| DetectionError::NotLabelable("no ground-truth next token".into()))
    };
    match kind {
        OracleKind::Planted => s
            .label
            .ok_or_else(|| DetectionError::NotLabelable("sample carries no planted label".into())),
        OracleKind::MclOracle => Ok(detection::mcl_oracle_label(&s.tokens, target()?, delta, grid, backend)?.label),
        OracleKind::LsdLclOracle => Ok(detection::lsd_lcl_oracle_label(&s.tokens, target()?, backend)?.label),
    }
}

pub fn run(run: &Run, samples: &Path) -> CliResult<()> {
    let backend = run.backend()?;
    let cfg = LsdsConfig {
        short_len: match &run.knobs.short_len {
            Some(s) => parse_one::<ShortLen>(s, "short_len")?,
            None => ShortLen::default(),
        },
        strategy: run.strategy()?,
        tau: run.knobs.tau.unwrap_or(DEFAULT_TAU),
        gamma: run.knobs.gamma.unwrap_or(DEFAULT_GAMMA),
    };
    cfg.validate()?;
    let kind: OracleKind = match &run.knobs.oracle {
        Some(o) => parse_one(o, "oracle")?,
        None => OracleKind::MclOracle,
    };
    let delta = run.knobs.delta.unwrap_or(DEFAULT_DELTA);
    let grid = grid(run, PrefixGrid::short_docs())?;
    let taus: Option<Vec<f64>> = run.knobs.sweep.as_deref().map(|s| parse_list(s, "sweep tau")).transpose()?;
    let input = io::read_samples(samples)?;

    if kind == OracleKind::Planted {
        if let Some(s) = input.iter().find(|s| s.label.is_none()) {
            return Err(CliError::data(format!("sample `{}` has no planted label", s.seq_id)));
        }
    }

    run.ensure_out()?;
    let mut writer = JsonlWriter::create(&run.out_path("detect.jsonl"))?;
    let mut scored: Vec<Scored> = Vec::new();
    let mut skipped = Vec::new();
    let mut failure: Option<CliError> = None;
    run.for_each_ordered(
        &input,
        |s| -> Result<Scored, DetectionError> {
            let lsds = detection::lsds(&s.tokens, &cfg, backend.as_ref())?;
            let oracle = oracle_label(s, kind, delta, &grid, backend.as_ref())?;
            Ok(Scored {
                lsds,
                pred: detection::label_for(lsds, cfg.tau),
                oracle,
            })
        },
        |s, r| {
            match r {
                Ok(sc) => {
                    writer.write(&json!({
                        "seq_id": s.seq_id,
                        "lsds": sc.lsds,
                        "label_pred": sc.pred,
                        "label_oracle": sc.oracle,
                        "oracle_kind": kind,
                    }))?;
                    scored.push(sc);
                }
                Err(e @ (DetectionError::TooShort { .. } | DetectionError::NotLabelable(_))) => {
                    skipped.push(json!({"seq_id": s.seq_id, "reason": e.to_string()}));
                }
                Err(e) => {
                    failure.get_or_insert(e.into());
                }
            }
            Ok(())
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }

    let pairs: Vec<(f64, Label)> = scored.iter().map(|s| (s.lsds, s.oracle)).collect();
    let preds: Vec<Label> = scored.iter().map(|s| s.pred).collect();
    let oracles: Vec<Label> = scored.iter().map(|s| s.oracle).collect();
    let matrix = confusion(&preds, &oracles)?;
    let mut warnings = Vec::new();
    let (auc, youden) = match (detection::roc_auc(&pairs), detection::youden_threshold(&pairs)) {
        (Ok(a), Ok(y)) => (Some(a), Some(y)),
        (Err(e), _) | (_, Err(e)) => {
            warnings.push(format!("AUC and Youden threshold undefined: {e}"));
            (None, None)
        }
    };
    if let Some(taus) = taus {
        let mut csv = String::from("tau,tpr,fpr,accuracy\n");
        match detection::tau_sweep(&pairs, &taus) {
            Ok(rows) => {
                for r in rows {
                    csv.push_str(&format!("{},{},{},{}\n", r.tau, r.tpr, r.fpr, r.accuracy));
                }
            }
            Err(e) => warnings.push(format!("tau sweep undefined: {e}")),
        }
        io::write_text(&run.out_path("tau_sweep.csv"), &csv)?;
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    write_report(
        &run.out_path("summary.json"),
        &json!({
            "command": "detect",
            "backend": run.backend_label(),
            "truncation": truncation_name(backend.as_ref()),
            "config": cfg,
            "oracle_kind": kind,
            "input": input.len(),
            "scored": scored.len(),
            "auc": auc,
            "youden": youden,
            "confusion": matrix,
            "accuracy": matrix.accuracy(),
            "skipped": skipped,
            "warnings": warnings,
        }),
    )?;
    Ok(())
}
