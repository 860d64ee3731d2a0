use std::time::Instant;

use ctxlens::decoding::apply_strategy;
use ctxlens::detection::DEFAULT_SHORT_LEN;
use ctxlens::dist;
use ctxlens::oracle::{prefix_distribution, OracleRequest};
use ctxlens::reporting::write_report;
use ctxlens::{seed, TokenId};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::{parse_list, parse_one};
use crate::context::Run;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Serialize)]
struct Row {
    len: usize,
    full_ms: f64,
    extra_ms: f64,
    ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

pub fn run(run: &Run) -> CliResult<()> {
    let backend = run.backend_uncached()?;
    let lengths: Vec<usize> = match &run.knobs.lengths {
        Some(l) => parse_list(l, "length")?,
        None => vec![128, 256, 512, 1024],
    };
    let repeats = run.knobs.repeats.unwrap_or(5);
    let short_len: usize = match &run.knobs.short_len {
        Some(s) => parse_one(s, "short_len")?,
        None => DEFAULT_SHORT_LEN,
    };
    if repeats == 0 {
        return Err(CliError::usage("--repeats must be >= 1"));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l <= short_len) {
        return Err(CliError::usage(format!("length {bad} must exceed the short length {short_len}")));
    }
    let strategy = run.strategy()?;
    let vocab = backend.vocab_size()?;
    let eos = backend.eos_token();

    let mut rows = Vec::new();
    for &len in &lengths {
        let mut rng = seed::rng(seed::derive(run.seed, len as u64));
        let tokens: Vec<TokenId> = (0..len)
            .map(|_| loop {
                let t = rng.random_range(0..vocab as TokenId);
                if Some(t) != eos {
                    break t;
                }
            })
            .collect();
        let (mut full_ms, mut extra_ms) = (Vec::new(), Vec::new());
        for _ in 0..repeats {
            let t0 = Instant::now();
            let full = backend.next_token_distribution(&OracleRequest::full(&tokens))?;
            full_ms.push(ms(t0));
            let t1 = Instant::now();
            let short = prefix_distribution(&tokens, short_len, backend.as_ref())?;
            let a = apply_strategy(&short, strategy).map_err(|e| CliError::data(e.to_string()))?;
            let b = apply_strategy(&full, strategy).map_err(|e| CliError::data(e.to_string()))?;
            std::hint::black_box(dist::jsd(&a, &b).map_err(|e| CliError::data(e.to_string()))?);
            extra_ms.push(ms(t1));
        }
        let (full, extra) = (median(full_ms), median(extra_ms));
        rows.push(Row {
            len,
            full_ms: full,
            extra_ms: extra,
            ratio: if full > 0.0 { extra / full } else { f64::NAN },
        });
    }

    run.ensure_out()?;
    let mut csv = String::from("len,full_ms,extra_ms,ratio\n");
    println!("{:>8} {:>12} {:>12} {:>8}", "len", "full_ms", "extra_ms", "ratio");
    for r in &rows {
        csv.push_str(&format!("{},{:.4},{:.4},{:.4}\n", r.len, r.full_ms, r.extra_ms, r.ratio));
        println!("{:>8} {:>12.3} {:>12.3} {:>8.3}", r.len, r.full_ms, r.extra_ms, r.ratio);
    }
    io::write_text(&run.out_path("bench.csv"), &csv)?;
    write_report(
        &run.out_path("summary.json"),
        &json!({
            "command": "bench",
            "backend": run.backend_label(),
            "strategy": strategy,
            "short_len": short_len,
            "repeats": repeats,
            "rows": rows,
        }),
    )?;
    Ok(())
}
