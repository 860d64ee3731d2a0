//! Long-context detection: the LSDS score, per-token shift measures,
//! ground-truth labelers, and threshold calibration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{apply_strategy, DecodingStrategy, StrategyError};
use crate::dist::{self, DistError, SupportSet, TokenDistribution, TokenId};
use crate::oracle::{prefix_distribution, Oracle, OracleError, OracleRequest};
use crate::probe::{self, PrefixGrid, ProbeError};

/// Floor applied before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-6;

pub const DEFAULT_SHORT_LEN: usize = 32;
pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_GAMMA: f64 = 0.1225;

/// LSD threshold of the log-probability labeler.
pub const LSD_THRESHOLD: f64 = 2.0;
/// LCL threshold of the log-probability labeler.
pub const LCL_THRESHOLD: f64 = -1.0;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("sequence shorter than short prefix ({len} <= {short_len})")]
    TooShort { len: usize, short_len: usize },
    #[error("not labelable: {0}")]
    NotLabelable(String),
    #[error("need scores for both classes")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Length of the short suffix: a token count or a fraction of `|s|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShortLen {
    Tokens(usize),
    Fraction(f64),
}

impl Default for ShortLen {
    fn default() -> Self {
        ShortLen::Tokens(DEFAULT_SHORT_LEN)
    }
}

impl ShortLen {
    /// Token count for a sequence of `len` tokens (fractions floor, min 1).
    pub fn resolve(&self, len: usize) -> usize {
        match *self {
            ShortLen::Tokens(n) => n,
            ShortLen::Fraction(f) => ((f * len as f64).floor() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        match *self {
            ShortLen::Tokens(n) if n >= 1 => Ok(()),
            ShortLen::Fraction(f) if f > 0.0 && f < 1.0 => Ok(()),
            other => Err(DetectionError::Config(format!("invalid short length {other}"))),
        }
    }
}

impl fmt::Display for ShortLen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShortLen::Tokens(n) => write!(f, "{n}"),
            ShortLen::Fraction(x) => write!(f, "{x}"),
        }
    }
}

/// An integer is a token count; anything with a decimal point a fraction.
impl FromStr for ShortLen {
    type Err = DetectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parsed = if s.contains('.') {
            s.parse().map(ShortLen::Fraction).ok()
        } else {
            s.parse().map(ShortLen::Tokens).ok()
        };
        let v = parsed.ok_or_else(|| DetectionError::Config(format!("invalid short length `{s}`")))?;
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdsConfig {
    pub short_len: ShortLen,
    pub strategy: DecodingStrategy,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for LsdsConfig {
    fn default() -> Self {
        Self {
            short_len: ShortLen::default(),
            strategy: DecodingStrategy::default(),
            tau: DEFAULT_TAU,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LsdsConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        self.short_len.validate()?;
        self.strategy.validate()?;
        let max = dist::jsd_max();
        for (name, v) in [("tau", self.tau), ("gamma", self.gamma)] {
            if !(0.0..=max).contains(&v) {
                return Err(DetectionError::Config(format!("{name} = {v} outside [0, {max:.6}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Short,
    Long,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Short => "short",
            Label::Long => "long",
        })
    }
}

/// Which ground-truth labeler produced a [`ContextLabel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    MclOracle,
    LsdLclOracle,
    Planted,
}

impl FromStr for OracleKind {
    type Err = DetectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mcl" | "mcl_oracle" => Ok(OracleKind::MclOracle),
            "lsd_lcl" | "lsd_lcl_oracle" => Ok(OracleKind::LsdLclOracle),
            "planted" => Ok(OracleKind::Planted),
            other => Err(DetectionError::Config(format!(
                "unknown oracle `{other}` (expected mcl, lsd_lcl or planted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLabel {
    pub label: Label,
    pub oracle: OracleKind,
}

/// The four outcomes of boosting relative to a reference token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Reference token boosted and most probable among the boosted tokens.
    Best,
    /// Reference token boosted but outranked by another boosted token.
    Bad,
    /// Other tokens boosted, the reference token not.
    Worst,
    /// Nothing boosted.
    Neutral,
}

/// Raw and decoded next-token distributions given the short suffix and the
/// full sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPair {
    pub short_len: usize,
    pub raw_short: TokenDistribution,
    pub raw_full: TokenDistribution,
    pub short: TokenDistribution,
    pub full: TokenDistribution,
}

impl ShiftPair {
    pub fn compute<O: Oracle + ?Sized>(
        s: &[TokenId],
        short_len: usize,
        strategy: DecodingStrategy,
        backend: &O,
    ) -> Result<Self, DetectionError> {
        if s.len() <= short_len {
            return Err(DetectionError::TooShort {
                len: s.len(),
                short_len,
            });
        }
        let raw_full = backend.next_token_distribution(&OracleRequest::full(s))?;
        let raw_short = prefix_distribution(s, short_len, backend)?;
        let full = apply_strategy(&raw_full, strategy)?;
        let short = apply_strategy(&raw_short, strategy)?;
        Ok(Self {
            short_len,
            raw_short,
            raw_full,
            short,
            full,
        })
    }

    pub fn lsds(&self) -> f64 {
        dist::jsd(&self.short, &self.full).expect("both distributions come from one backend")
    }

    pub fn lsps(&self, t: TokenId) -> f64 {
        self.full.prob(t) - self.short.prob(t)
    }

    pub fn lspr(&self, t: TokenId) -> f64 {
        log_ratio(self.full.prob(t), self.short.prob(t))
    }
}

fn log_ratio(num: f64, den: f64) -> f64 {
    num.max(PROB_FLOOR).ln() - den.max(PROB_FLOOR).ln()
}

fn pair<O: Oracle + ?Sized>(s: &[TokenId], cfg: &LsdsConfig, backend: &O) -> Result<ShiftPair, DetectionError> {
    cfg.validate()?;
    ShiftPair::compute(s, cfg.short_len.resolve(s.len()), cfg.strategy, backend)
}

/// JSD between the decoded short-suffix and full-context distributions.
pub fn lsds<O: Oracle + ?Sized>(s: &[TokenId], cfg: &LsdsConfig, backend: &O) -> Result<f64, DetectionError> {
    Ok(pair(s, cfg, backend)?.lsds())
}

/// Long iff `score >= tau`.
pub fn label_for(score: f64, tau: f64) -> Label {
    if score >= tau {
        Label::Long
    } else {
        Label::Short
    }
}

pub fn classify<O: Oracle + ?Sized>(s: &[TokenId], cfg: &LsdsConfig, backend: &O) -> Result<Label, DetectionError> {
    Ok(label_for(lsds(s, cfg, backend)?, cfg.tau))
}

/// Probability shift of `t` from the short suffix to the full context.
pub fn lsps<O: Oracle + ?Sized>(
    t: TokenId,
    s: &[TokenId],
    cfg: &LsdsConfig,
    backend: &O,
) -> Result<f64, DetectionError> {
    let p = pair(s, cfg, backend)?;
    check_token(t, &p.full)?;
    Ok(p.lsps(t))
}

/// Log ratio of `t`'s full-context to short-suffix probability, both floored.
pub fn lspr<O: Oracle + ?Sized>(
    t: TokenId,
    s: &[TokenId],
    cfg: &LsdsConfig,
    backend: &O,
) -> Result<f64, DetectionError> {
    let p = pair(s, cfg, backend)?;
    check_token(t, &p.full)?;
    Ok(p.lspr(t))
}

fn check_token(t: TokenId, d: &TokenDistribution) -> Result<(), DetectionError> {
    if t as usize >= d.vocab_size() {
        return Err(DistError::TokenOutOfRange {
            token: t,
            vocab_size: d.vocab_size(),
        }
        .into());
    }
    Ok(())
}

/// Long iff the resolved MCL exceeds the grid start.
pub fn mcl_oracle_label<O: Oracle + ?Sized>(
    s: &[TokenId],
    t: TokenId,
    delta: f64,
    grid: &PrefixGrid,
    backend: &O,
) -> Result<ContextLabel, DetectionError> {
    let r = probe::mcl(s, t, delta, grid, backend)?;
    let ell = r
        .resolved_length
        .ok_or_else(|| DetectionError::NotLabelable("MCL did not resolve".into()))?;
    let label = if ell > grid.min_length() {
        Label::Long
    } else {
        Label::Short
    };
    Ok(ContextLabel {
        label,
        oracle: OracleKind::MclOracle,
    })
}

/// Values behind the log-probability labeler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdLcl {
    pub lsd: f64,
    pub lcl: f64,
    pub label: Label,
}

impl LsdLcl {
    pub fn from_probs(p_full: f64, p_short: f64) -> Self {
        let lcl = p_full.ln();
        let lsd = lcl - p_short.max(PROB_FLOOR).ln();
        let label = if lsd > LSD_THRESHOLD && lcl >= LCL_THRESHOLD {
            Label::Long
        } else {
            Label::Short
        };
        Self { lsd, lcl, label }
    }
}

/// Labels with the raw (undecoded) log-probability lift of `t`.
pub fn lsd_lcl_values<O: Oracle + ?Sized>(
    s: &[TokenId],
    t: TokenId,
    short_len: usize,
    backend: &O,
) -> Result<LsdLcl, DetectionError> {
    if s.len() <= short_len {
        return Err(DetectionError::TooShort {
            len: s.len(),
            short_len,
        });
    }
    let full = backend.next_token_distribution(&OracleRequest::full(s))?;
    check_token(t, &full)?;
    let short = prefix_distribution(s, short_len, backend)?;
    Ok(LsdLcl::from_probs(full.prob(t), short.prob(t)))
}

pub fn lsd_lcl_oracle_label<O: Oracle + ?Sized>(
    s: &[TokenId],
    t: TokenId,
    backend: &O,
) -> Result<ContextLabel, DetectionError> {
    let v = lsd_lcl_values(s, t, DEFAULT_SHORT_LEN, backend)?;
    Ok(ContextLabel {
        label: v.label,
        oracle: OracleKind::LsdLclOracle,
    })
}

pub fn scenario(t_hat: TokenId, boosted: &SupportSet, full_dist: &TokenDistribution) -> Scenario {
    if boosted.is_empty() {
        return Scenario::Neutral;
    }
    if !boosted.contains(t_hat) {
        return Scenario::Worst;
    }
    let p_hat = full_dist.prob(t_hat);
    if boosted.iter().all(|u| full_dist.prob(u) <= p_hat) {
        Scenario::Best
    } else {
        Scenario::Bad
    }
}

fn class_counts(scores: &[(f64, Label)]) -> Result<(usize, usize), DetectionError> {
    let pos = scores.iter().filter(|(_, l)| *l == Label::Long).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DetectionError::SingleClass);
    }
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(DetectionError::Config("NaN score".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random long-labeled score exceeds a random
/// short-labeled one, ties counting one half.
pub fn roc_auc(scores: &[(f64, Label)]) -> Result<f64, DetectionError> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<&(f64, Label)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * sorted[i..=j].iter().filter(|(_, l)| *l == Label::Long).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenPoint {
    pub theta: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Threshold maximizing `TPR − FPR` for the rule "long iff score ≥ θ".
///
/// Candidates are `−∞`, the midpoints between adjacent distinct scores, and
/// `+∞`; ties go to the smallest θ.
pub fn youden_threshold(scores: &[(f64, Label)]) -> Result<YoudenPoint, DetectionError> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (p, n) = (pos as f64, neg as f64);

    // θ = −∞: everything predicted long
    let (mut tp, mut fp) = (pos, neg);
    let mut best = YoudenPoint {
        theta: f64::NEG_INFINITY,
        j: 0.0,
        tpr: 1.0,
        fpr: 1.0,
    };
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            match sorted[i].1 {
                Label::Long => tp -= 1,
                Label::Short => fp -= 1,
            }
            i += 1;
        }
        let theta = if i < sorted.len() {
            v + (sorted[i].0 - v) / 2.0
        } else {
            f64::INFINITY
        };
        let (tpr, fpr) = (tp as f64 / p, fp as f64 / n);
        let j = tpr - fpr;
        if j > best.j + 1e-12 {
            best = YoudenPoint { theta, j, tpr, fpr };
        }
    }
    Ok(best)
}

/// One row of a τ sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
}

pub fn tau_sweep(scores: &[(f64, Label)], taus: &[f64]) -> Result<Vec<SweepRow>, DetectionError> {
    let (pos, neg) = class_counts(scores)?;
    Ok(taus
        .iter()
        .map(|&tau| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for &(s, l) in scores {
                if label_for(s, tau) == Label::Long {
                    match l {
                        Label::Long => tp += 1,
                        Label::Short => fp += 1,
                    }
                }
            }
            let tn = neg - fp;
            SweepRow {
                tau,
                tpr: tp as f64 / pos as f64,
                fpr: fp as f64 / neg as f64,
                accuracy: (tp + tn) as f64 / scores.len() as f64,
            }
        })
        .collect())
}
