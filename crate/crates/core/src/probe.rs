//! Minimal-context-length searches.
//!
//! Both searches walk a grid of suffix lengths in ascending order and stop at
//! the first length that passes their acceptance test:
//!
//! * [`mcl`]: the model's top prediction equals the reference token with a
//!   confidence gap of at least `delta`;
//! * [`damcl`]: the decoded distribution given the suffix is within
//!   `epsilon` of the decoded full-context distribution under some metric.

use std::fmt;
use std::str::FromStr;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::SequenceSample;
use crate::decoding::{self, apply_strategy, DecodingStrategy, StrategyError};
use crate::dist::{self, DistError, PowerLawFit, TokenDistribution, TokenId};
use crate::oracle::{prefix_distribution, Oracle, OracleError, OracleRequest};
use crate::reporting::Histogram;

/// Default confidence gap for [`mcl`].
pub const DEFAULT_DELTA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("backend failed after {} grid point(s): {source}", partial.len())]
    Backend {
        #[source]
        source: OracleError,
        partial: Vec<TracePoint>,
    },
    #[error("invalid probe input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl ProbeError {
    fn backend(source: OracleError, partial: &[TracePoint]) -> Self {
        ProbeError::Backend {
            source,
            partial: partial.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// `start, start + step, …`, with `|s|` appended.
    FixedStep,
    /// `⌈q · |s|⌉` for each fraction `q`.
    Percentile,
    /// Fixed step of 50 starting at 50.
    Fixed50,
}

/// The suffix lengths a search evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixGrid {
    pub mode: GridMode,
    pub start: usize,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub percentiles: Vec<f64>,
}

impl Default for PrefixGrid {
    fn default() -> Self {
        Self::short_docs()
    }
}

impl PrefixGrid {
    pub fn fixed(start: usize, step: usize) -> Self {
        Self {
            mode: GridMode::FixedStep,
            start,
            step,
            percentiles: Vec::new(),
        }
    }

    /// 32, 48, 64, …
    pub fn short_docs() -> Self {
        Self::fixed(32, 16)
    }

    /// 32, 96, 160, …
    pub fn long_docs() -> Self {
        Self::fixed(32, 64)
    }

    pub fn fixed_50() -> Self {
        Self {
            mode: GridMode::Fixed50,
            start: 50,
            step: 50,
            percentiles: Vec::new(),
        }
    }

    /// The last 10 %, 20 %, …, 100 % of the sequence.
    pub fn percentile() -> Self {
        Self::with_percentiles((1..=10).map(|i| i as f64 / 10.0).collect())
    }

    pub fn with_percentiles(percentiles: Vec<f64>) -> Self {
        Self {
            mode: GridMode::Percentile,
            start: 1,
            step: 1,
            percentiles,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        match self.mode {
            GridMode::FixedStep | GridMode::Fixed50 => {
                if self.start == 0 || self.step == 0 {
                    return Err(ProbeError::Invalid("grid start and step must be >= 1".into()));
                }
            }
            GridMode::Percentile => {
                let ps = &self.percentiles;
                let increasing = ps.windows(2).all(|w| w[0] < w[1]);
                if ps.is_empty() || !increasing || ps[0] <= 0.0 || *ps.last().unwrap() != 1.0 {
                    return Err(ProbeError::Invalid(
                        "percentiles must be strictly increasing in (0, 1] and end at 1.0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Smallest length the grid can evaluate.
    pub fn min_length(&self) -> usize {
        match self.mode {
            GridMode::Percentile => 1,
            _ => self.start,
        }
    }

    /// Ascending suffix lengths for a sequence of `len` tokens; the last one
    /// is always `len`.
    pub fn points(&self, len: usize) -> Vec<usize> {
        if len == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        match self.mode {
            GridMode::FixedStep | GridMode::Fixed50 => {
                let mut ell = self.start.max(1);
                while ell < len {
                    out.push(ell);
                    ell += self.step.max(1);
                }
            }
            GridMode::Percentile => {
                for &q in &self.percentiles {
                    // the slack keeps 0.1 · 1000 from rounding up to 101
                    let ell = ((q * len as f64) - 1e-9).ceil().max(1.0) as usize;
                    if ell < len && out.last().is_none_or(|&last| last < ell) {
                        out.push(ell);
                    }
                }
            }
        }
        out.push(len);
        out
    }
}

impl fmt::Display for PrefixGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            GridMode::FixedStep => write!(f, "fixed:{}:{}", self.start, self.step),
            GridMode::Fixed50 => write!(f, "fixed50"),
            GridMode::Percentile => write!(f, "percentile"),
        }
    }
}

/// `fixed:START:STEP`, `short`, `long`, `fixed50` or `percentile`.
impl FromStr for PrefixGrid {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let grid = match s.trim() {
            "short" => Self::short_docs(),
            "long" => Self::long_docs(),
            "fixed50" | "fixed_50" => Self::fixed_50(),
            "percentile" => Self::percentile(),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                match parts.as_slice() {
                    ["fixed", start, step] => {
                        let parse = |v: &str| {
                            v.parse::<usize>()
                                .map_err(|_| ProbeError::Invalid(format!("bad grid `{other}`")))
                        };
                        Self::fixed(parse(start)?, parse(step)?)
                    }
                    _ => return Err(ProbeError::Invalid(format!("unknown grid `{other}`"))),
                }
            }
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Distance between the suffix and full-context decoded distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Jsd,
    Tvd,
    /// `KL(suffix ‖ full)`.
    Kl,
    /// One minus the F1 of the two supports.
    OneMinusF1,
}

impl Metric {
    pub fn eval(&self, prefix: &TokenDistribution, full: &TokenDistribution) -> Result<f64, DistError> {
        match self {
            Metric::Jsd => dist::jsd(prefix, full),
            Metric::Tvd => dist::tvd(prefix, full),
            Metric::Kl => dist::kl(prefix, full),
            Metric::OneMinusF1 => {
                if prefix.vocab_size() != full.vocab_size() {
                    return Err(DistError::DimensionMismatch {
                        left: prefix.vocab_size(),
                        right: full.vocab_size(),
                    });
                }
                Ok(1.0 - dist::set_metrics(&prefix.support(), &full.support()).f1)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Jsd => "jsd",
            Metric::Tvd => "tvd",
            Metric::Kl => "kl",
            Metric::OneMinusF1 => "one_minus_f1",
        })
    }
}

impl FromStr for Metric {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsd" => Ok(Metric::Jsd),
            "tvd" => Ok(Metric::Tvd),
            "kl" => Ok(Metric::Kl),
            "one_minus_f1" | "1-f1" => Ok(Metric::OneMinusF1),
            other => Err(ProbeError::Invalid(format!(
                "unknown metric `{other}` (expected jsd, tvd, kl or one_minus_f1)"
            ))),
        }
    }
}

/// One evaluated grid point. For [`mcl`] the value is the confidence gap and
/// `top1` the predicted token; for [`damcl`] the value is the metric.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct TracePoint {
    pub ell: usize,
    pub value: f64,
    pub top1: Option<TokenId>,
}

/// Serialized as `[ell, value]` or `[ell, value, top1]`.
impl Serialize for TracePoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(if self.top1.is_some() { 3 } else { 2 }))?;
        seq.serialize_element(&self.ell)?;
        seq.serialize_element(&self.value)?;
        if let Some(t) = self.top1 {
            seq.serialize_element(&t)?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    /// First grid length that passed, or `None` if no grid point did.
    pub resolved_length: Option<usize>,
    pub trace: Vec<TracePoint>,
    pub grid: PrefixGrid,
    /// `delta` for MCL, `epsilon` for DaMCL.
    pub threshold: f64,
    pub sequence_length: usize,
}

impl ProbeResult {
    pub fn is_resolved(&self) -> bool {
        self.resolved_length.is_some()
    }

    /// The JSON-lines record written for each probed sequence.
    pub fn record(&self, seq_id: &str) -> serde_json::Value {
        serde_json::json!({
            "seq_id": seq_id,
            "resolved": self.is_resolved(),
            "length": self.resolved_length,
            "grid": self.grid,
            "trace": self.trace,
        })
    }
}

fn check_sequence(s: &[TokenId], grid: &PrefixGrid) -> Result<(), ProbeError> {
    grid.validate()?;
    if s.is_empty() {
        return Err(ProbeError::Invalid("empty sequence".into()));
    }
    if s.len() < grid.min_length() {
        return Err(ProbeError::Invalid(format!(
            "sequence of {} tokens is shorter than the grid start {}",
            s.len(),
            grid.min_length()
        )));
    }
    Ok(())
}

/// Shortest suffix on which the model predicts `t` as its top token with a
/// confidence gap of at least `delta`.
pub fn mcl<O: Oracle + ?Sized>(
    s: &[TokenId],
    t: TokenId,
    delta: f64,
    grid: &PrefixGrid,
    backend: &O,
) -> Result<ProbeResult, ProbeError> {
    check_sequence(s, grid)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(ProbeError::Invalid(format!("delta {delta} outside [0, 1]")));
    }
    let vocab = backend.vocab_size().map_err(|e| ProbeError::backend(e, &[]))?;
    if t as usize >= vocab {
        return Err(ProbeError::Invalid(format!("token {t} outside vocabulary of size {vocab}")));
    }
    let mut trace = Vec::new();
    for ell in grid.points(s.len()) {
        let raw = prefix_distribution(s, ell, backend).map_err(|e| ProbeError::backend(e, &trace))?;
        let top = decoding::top1(&raw);
        let conf = decoding::confidence(&raw)?;
        trace.push(TracePoint {
            ell,
            value: conf,
            top1: Some(top),
        });
        if top == t && conf >= delta {
            return Ok(ProbeResult {
                resolved_length: Some(ell),
                trace,
                grid: grid.clone(),
                threshold: delta,
                sequence_length: s.len(),
            });
        }
    }
    Ok(ProbeResult {
        resolved_length: None,
        trace,
        grid: grid.clone(),
        threshold: delta,
        sequence_length: s.len(),
    })
}

/// Shortest suffix whose decoded distribution lies within `epsilon` of the
/// decoded full-context distribution. The full length always qualifies, so
/// the result is always resolved.
pub fn damcl<O: Oracle + ?Sized>(
    s: &[TokenId],
    strategy: DecodingStrategy,
    metric: Metric,
    epsilon: f64,
    grid: &PrefixGrid,
    backend: &O,
) -> Result<ProbeResult, ProbeError> {
    check_sequence(s, grid)?;
    if !(epsilon > 0.0) {
        return Err(ProbeError::Invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    strategy.validate()?;
    let full_raw = backend
        .next_token_distribution(&OracleRequest::full(s))
        .map_err(|e| ProbeError::backend(e, &[]))?;
    let reference = apply_strategy(&full_raw, strategy)?;
    let mut trace = Vec::new();
    for ell in grid.points(s.len()) {
        let decoded = if ell == s.len() {
            reference.clone()
        } else {
            let raw = prefix_distribution(s, ell, backend).map_err(|e| ProbeError::backend(e, &trace))?;
            apply_strategy(&raw, strategy)?
        };
        let value = metric.eval(&decoded, &reference)?;
        trace.push(TracePoint {
            ell,
            value,
            top1: None,
        });
        if value <= epsilon {
            return Ok(ProbeResult {
                resolved_length: Some(ell),
                trace,
                grid: grid.clone(),
                threshold: epsilon,
                sequence_length: s.len(),
            });
        }
    }
    unreachable!("the final grid point compares the reference with itself")
}

/// Samples rejected by [`filter_confident_correct`], with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub seq_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<SequenceSample>,
    pub dropped: usize,
    pub rejected: Vec<Rejection>,
}

/// Keeps the samples whose full-context prediction is their ground-truth
/// next token with a confidence gap of at least `delta`.
pub fn filter_confident_correct<O: Oracle + ?Sized>(
    samples: &[SequenceSample],
    delta: f64,
    backend: &O,
) -> Result<FilterOutcome, OracleError> {
    let mut out = FilterOutcome::default();
    for sample in samples {
        let Some(t) = sample.next_token else {
            out.rejected.push(Rejection {
                seq_id: sample.seq_id.clone(),
                reason: "no ground-truth next token".into(),
            });
            continue;
        };
        let raw = backend.next_token_distribution(&OracleRequest::full(&sample.tokens))?;
        let conf = decoding::confidence(&raw).map_err(|e| OracleError::Request(e.to_string()))?;
        if decoding::top1(&raw) == t && conf >= delta {
            out.kept.push(sample.clone());
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MclHistogram {
    pub histogram: Histogram,
    /// `None` when fewer than two bins are populated.
    pub fit: Option<PowerLawFit>,
}

impl MclHistogram {
    /// The fitted exponent in the negative-slope convention, e.g. −2.6.
    pub fn b_hat(&self) -> Option<f64> {
        self.fit.map(|f| f.signed_exponent())
    }
}

/// Counts of resolved lengths plus a power-law fit over the populated bins.
pub fn mcl_histogram(results: &[ProbeResult]) -> Result<MclHistogram, ProbeError> {
    if results.is_empty() {
        return Err(ProbeError::Invalid("no probe results".into()));
    }
    let lengths = results
        .iter()
        .map(|r| {
            r.resolved_length
                .ok_or_else(|| ProbeError::Invalid("histogram input contains unresolved results".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let histogram = Histogram::from_values(&lengths);
    let points: Vec<(f64, f64)> = histogram
        .points
        .iter()
        .zip(&histogram.counts)
        .map(|(&x, &c)| (x as f64, c as f64))
        .collect();
    let fit = dist::fit_power_law(&points).ok();
    Ok(MclHistogram { histogram, fit })
}
