use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::Duration;

use ctxlens::oracle::{
    BackendEndpoint, CachedOracle, HttpOracle, LatencyOracle, MockOracle, MockOracleSpec, OpenAiCompletionOracle,
    Oracle, TopLogprobs, Truncation,
};

use crate::args::{parse_one, Knobs};
use crate::error::{CliError, CliResult};

pub const BACKEND_URL_ENV: &str = "CTXLENS_BACKEND_URL";
const DEFAULT_CACHE: usize = 4096;

/// The backend description from `--backend`, falling back to the
/// environment variable.
pub fn backend_spec(knobs: &Knobs) -> CliResult<String> {
    if let Some(b) = &knobs.backend {
        return Ok(b.clone());
    }
    match std::env::var(BACKEND_URL_ENV) {
        Ok(url) if !url.trim().is_empty() => Ok(format!("http:{}", url.trim())),
        _ => Err(CliError::usage(format!(
            "no backend: pass --backend or set {BACKEND_URL_ENV}"
        ))),
    }
}

fn endpoint(url: &str, knobs: &Knobs, parallel: usize) -> CliResult<BackendEndpoint> {
    let mut ep = BackendEndpoint::new(url);
    ep.max_parallel = parallel;
    if let Some(t) = knobs.timeout_ms {
        ep.timeout_ms = t;
    }
    if let Some(top) = &knobs.top_logprobs {
        ep.top_logprobs = if top.trim() == "full" {
            TopLogprobs::Full
        } else {
            TopLogprobs::Top(parse_one(top, "top_logprobs")?)
        };
    }
    ep.vocab_size = knobs.vocab_size;
    ep.eos_token = knobs.eos;
    ep.masking = knobs.masking.unwrap_or(false);
    ep.model = knobs.model.clone();
    Ok(ep)
}

fn mock(spec: &str, knobs: &Knobs) -> CliResult<Arc<dyn Oracle>> {
    let parsed: MockOracleSpec = if let Some(path) = spec.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read mock spec {path}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("mock spec {path}: {e}")))?
    } else {
        spec.parse().map_err(|e| CliError::usage(format!("{e}")))?
    };
    let m = MockOracle::new(parsed)
        .map_err(|e| CliError::usage(e.to_string()))?
        .with_eos(knobs.eos);
    let base = knobs.latency_ms.unwrap_or(0.0);
    let per_token = knobs.latency_per_token_ms.unwrap_or(0.0);
    if base < 0.0 || per_token < 0.0 {
        return Err(CliError::usage("latencies must be >= 0"));
    }
    if base > 0.0 || per_token > 0.0 {
        let ms = |x: f64| Duration::from_secs_f64(x / 1000.0);
        return Ok(Arc::new(LatencyOracle::new(m, ms(base), ms(per_token))));
    }
    Ok(Arc::new(m))
}

/// Builds the configured backend, optionally behind a response cache.
pub fn build(knobs: &Knobs, parallel: usize, cached: bool) -> CliResult<Arc<dyn Oracle>> {
    let mut spec = backend_spec(knobs)?;
    if spec.starts_with("http://") || spec.starts_with("https://") {
        spec = format!("http:{spec}");
    }
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("backend `{spec}` needs a kind prefix")))?;
    let raw: Arc<dyn Oracle> = match kind {
        "mock" => mock(rest, knobs)?,
        "http" => Arc::new(HttpOracle::new(endpoint(rest, knobs, parallel)?)?),
        "openai" => Arc::new(
            OpenAiCompletionOracle::new(endpoint(rest, knobs, parallel)?).map_err(|e| CliError::usage(e.to_string()))?,
        ),
        other => return Err(CliError::usage(format!("unknown backend kind `{other}`"))),
    };
    let capacity = knobs.cache.unwrap_or(DEFAULT_CACHE);
    match NonZeroUsize::new(capacity).filter(|_| cached) {
        Some(cap) => Ok(Arc::new(CachedOracle::new(raw, cap))),
        None => Ok(raw),
    }
}

pub fn truncation_name(backend: &dyn Oracle) -> &'static str {
    match backend.truncation() {
        Truncation::Literal => "literal",
        Truncation::Masked => "masked",
    }
}
