use std::path::{Path, PathBuf};

use ctxlens::corpus::{self, SequenceSample, SyntheticSample, SyntheticSpec};
use ctxlens::detection::Label;
use ctxlens::oracle::{Oracle, WordVocab};
use ctxlens::reporting::JsonlWriter;
use ctxlens::{seed, TokenId};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::args::SynthKind;
use crate::context::Run;
use crate::error::{CliError, CliResult};

pub fn run(run: &Run, kind: &SynthKind) -> CliResult<()> {
    match kind {
        SynthKind::Planted {
            count,
            seq_len,
            short_share,
            window,
            output,
        } => planted(run, *count, *seq_len, *short_share, *window, output.as_deref()),
        SynthKind::Niah {
            count,
            total_len,
            window,
            output,
        } => niah(run, *count, *total_len, *window, output.as_deref()),
        SynthKind::Longeval {
            count,
            lines,
            window,
            output,
        } => longeval(run, *count, *lines, *window, output.as_deref()),
    }
}

fn output_path(run: &Run, output: Option<&Path>) -> CliResult<PathBuf> {
    match output {
        Some(p) => Ok(p.to_path_buf()),
        None => Ok(run.ensure_out()?.join("samples.jsonl")),
    }
}

/// Sequences for the marker mock: the marker sits `d` tokens from the end
/// with the answer right after it, so the minimal context length is `d`.
fn planted(
    run: &Run,
    count: usize,
    seq_len: usize,
    short_share: f64,
    window: usize,
    output: Option<&Path>,
) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::usage("--count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&short_share) {
        return Err(CliError::usage("--short-share must lie in [0, 1]"));
    }
    if window < 2 || seq_len <= window + 1 {
        return Err(CliError::usage("need 2 <= window < seq_len - 1"));
    }
    let vocab = WordVocab::builtin();
    let words = vocab.word_ids();
    let marker = vocab.len() as TokenId;
    let n_short = (count as f64 * short_share).round() as usize;
    let mut rng = seed::rng(seed::derive_str(run.seed, "planted"));
    let mut distances: Vec<usize> = (0..count)
        .map(|i| {
            if i < n_short {
                rng.random_range(2..=window)
            } else {
                rng.random_range(window + 1..seq_len)
            }
        })
        .collect();
    distances.shuffle(&mut rng);

    let mut writer = JsonlWriter::create(&output_path(run, output)?)?;
    for (i, &d) in distances.iter().enumerate() {
        let mut tokens: Vec<TokenId> = (0..seq_len).map(|_| rng.random_range(words.clone())).collect();
        let answer = rng.random_range(words.clone());
        tokens[seq_len - d] = marker;
        tokens[seq_len - d + 1] = answer;
        writer.write(&SequenceSample {
            seq_id: format!("planted/{i:05}"),
            doc_id: "planted".into(),
            tokens,
            next_token: Some(answer),
            bucket: (seq_len, seq_len + 1),
            label: Some(if d <= window { Label::Short } else { Label::Long }),
        })?;
    }
    Ok(())
}

fn filler(backend: &dyn Oracle, words: usize, rng_seed: u64) -> CliResult<Vec<TokenId>> {
    let vocab = WordVocab::builtin();
    let ids = vocab.word_ids();
    let mut rng = seed::rng(rng_seed);
    let text: Vec<String> = (0..words)
        .map(|_| vocab.detokenize(&[rng.random_range(ids.clone())]))
        .collect();
    Ok(backend.tokenize(&text.join(" "))?)
}

fn write_synthetic(writer: &mut JsonlWriter, s: SyntheticSample) -> CliResult<()> {
    let mut record = serde_json::to_value(&s.sample)?;
    record
        .as_object_mut()
        .expect("object")
        .insert("answer".into(), json!(s.answer_text));
    writer.write(&record)?;
    Ok(())
}

fn niah(run: &Run, count: usize, total_len: usize, window: usize, output: Option<&Path>) -> CliResult<()> {
    let backend = run.backend()?;
    let filler = filler(backend.as_ref(), total_len * 2, seed::derive_str(run.seed, "niah-filler"))?;
    let query_len = backend.tokenize(corpus::NIAH_QUERY)?.len();
    let mut rng = seed::rng(seed::derive_str(run.seed, "niah"));
    let mut writer = JsonlWriter::create(&output_path(run, output)?)?;
    for i in 0..count {
        // the needle needs roughly a dozen tokens before the query
        let hi = total_len.saturating_sub(16).max(query_len + 1);
        let spec = SyntheticSpec::NiahMagic {
            total_len,
            needle_distance: rng.random_range(query_len..hi),
            digits: 6,
            window,
        };
        let s = corpus::gen_niah(&spec, &filler, seed::derive(run.seed, i as u64), backend.as_ref())?;
        write_synthetic(&mut writer, s)?;
    }
    Ok(())
}

fn longeval(run: &Run, count: usize, lines: usize, window: usize, output: Option<&Path>) -> CliResult<()> {
    let backend = run.backend()?;
    let mut rng = seed::rng(seed::derive_str(run.seed, "longeval"));
    let mut writer = JsonlWriter::create(&output_path(run, output)?)?;
    for i in 0..count {
        let spec = SyntheticSpec::LongevalRegisters {
            lines,
            answer_line_distance: rng.random_range(0..lines.max(1)),
            window,
        };
        let s = corpus::gen_longeval(&spec, seed::derive(run.seed, i as u64), backend.as_ref())?;
        write_synthetic(&mut writer, s)?;
    }
    Ok(())
}
