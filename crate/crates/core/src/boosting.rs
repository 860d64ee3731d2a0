//! Decoding-time interventions: targeted boosting (TaBoo), the
//! context-aware decoding (CAD) baseline, and the generation loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{self, apply_strategy, DecodingStrategy, StrategyError};
use crate::detection::{self, Scenario, ShiftPair, PROB_FLOOR};
use crate::dist::{DistError, SupportSet, TokenDistribution, TokenId, SUM_TOLERANCE};
use crate::oracle::{prefix_distribution, Oracle, OracleError, OracleRequest};
use crate::seed;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Same slack as nucleus truncation uses for its cumulative-mass test.
const NUCLEUS_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<detection::DetectionError> for BoostError {
    fn from(e: detection::DetectionError) -> Self {
        match e {
            detection::DetectionError::Oracle(o) => BoostError::Oracle(o),
            detection::DetectionError::Strategy(s) => BoostError::Strategy(s),
            detection::DetectionError::Dist(d) => BoostError::Dist(d),
            other => BoostError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    /// LSDS gate: boosting only happens when LSDS exceeds it.
    pub gamma: f64,
    /// LSPS gate: tokens whose shift exceeds it are boosted.
    pub epsilon: f64,
    pub lambda: f64,
    pub strategy: DecodingStrategy,
    pub short_len: usize,
}

impl BoostConfig {
    /// Defaults for everything but the boost factor, which has none.
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            gamma: detection::DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            lambda,
            strategy: DecodingStrategy::default(),
            short_len: detection::DEFAULT_SHORT_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), BoostError> {
        self.strategy.validate()?;
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(BoostError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(BoostError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(BoostError::Config(format!("lambda must be finite and >= 1, got {}", self.lambda)));
        }
        if self.short_len == 0 {
            return Err(BoostError::Config("short_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Serializes a distribution as its vocabulary size plus nonzero entries.
mod sparse {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::dist::{TokenDistribution, TokenId};

    #[derive(Serialize, Deserialize)]
    struct Sparse {
        vocab_size: usize,
        entries: Vec<(TokenId, f64)>,
    }

    pub fn serialize<S: Serializer>(d: &TokenDistribution, s: S) -> Result<S::Ok, S::Error> {
        Sparse {
            vocab_size: d.vocab_size(),
            entries: d.sparse(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TokenDistribution, D::Error> {
        let sp = Sparse::deserialize(d)?;
        let mut probs = vec![0.0; sp.vocab_size];
        for (t, p) in sp.entries {
            let slot = probs
                .get_mut(t as usize)
                .ok_or_else(|| serde::de::Error::custom(format!("token {t} out of range")))?;
            *slot = p;
        }
        TokenDistribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Per-step record of what the decoder did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostReport {
    pub step: usize,
    /// `None` when the step never computed a short-suffix distribution.
    pub lsds: Option<f64>,
    pub boosted_set: SupportSet,
    /// Decoded full-context distribution.
    #[serde(with = "sparse")]
    pub pre_dist: TokenDistribution,
    /// Distribution actually sampled from.
    #[serde(with = "sparse")]
    pub post_dist: TokenDistribution,
    pub chosen: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl BoostReport {
    fn unmodified(dist: TokenDistribution, lsds: Option<f64>) -> Self {
        Self {
            step: 0,
            lsds,
            boosted_set: SupportSet::new(),
            pre_dist: dist.clone(),
            post_dist: dist,
            chosen: None,
            scenario: None,
            warning: None,
        }
    }
}

/// Scales the boosted tokens of the decoded distribution and re-truncates.
///
/// Tokens of the original support are ordered by boosted weight; for nucleus
/// strategies the smallest leading run whose raw model mass reaches `p` is
/// kept, otherwise the whole support is. Kept weights are renormalized.
fn boost(
    raw: &TokenDistribution,
    decoded: &TokenDistribution,
    boosted: &SupportSet,
    lambda: f64,
    strategy: DecodingStrategy,
) -> TokenDistribution {
    let raw_p = raw.probs();
    let weight = |t: TokenId| {
        let p = raw_p[t as usize];
        if boosted.contains(t) {
            p * lambda
        } else {
            p
        }
    };
    let mut order: Vec<TokenId> = decoded.support().iter().collect();
    order.sort_by(|&a, &b| {
        weight(b)
            .total_cmp(&weight(a))
            .then(raw_p[b as usize].total_cmp(&raw_p[a as usize]))
            .then(a.cmp(&b))
    });
    if let DecodingStrategy::Nucleus(p) = strategy {
        let mut mass = 0.0;
        let mut keep = order.len();
        for (i, &t) in order.iter().enumerate() {
            mass += raw_p[t as usize];
            if mass >= p - NUCLEUS_SLACK {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|&t| weight(t)).sum();
    let mut out = vec![0.0; raw_p.len()];
    for &t in &order {
        out[t as usize] = weight(t) / total;
    }
    TokenDistribution::new(out).expect("renormalized weights over a positive support")
}

/// One step of targeted boosting.
///
/// When LSDS does not exceed `gamma` the vanilla decoded distribution is
/// returned unchanged. Otherwise tokens of its support whose LSPS exceeds
/// `epsilon` are scaled by `lambda` before re-truncation.
pub fn taboo_step<O: Oracle + ?Sized>(
    s: &[TokenId],
    cfg: &BoostConfig,
    backend: &O,
) -> Result<(TokenDistribution, BoostReport), BoostError> {
    cfg.validate()?;
    if s.len() <= cfg.short_len {
        let raw = backend.next_token_distribution(&OracleRequest::full(s))?;
        let vanilla = apply_strategy(&raw, cfg.strategy)?;
        let mut report = BoostReport::unmodified(vanilla.clone(), None);
        report.warning = Some(format!(
            "context of {} tokens is not longer than the short prefix ({}); boosting skipped",
            s.len(),
            cfg.short_len
        ));
        return Ok((vanilla, report));
    }
    let pair = ShiftPair::compute(s, cfg.short_len, cfg.strategy, backend)?;
    let lsds = pair.lsds();
    if lsds <= cfg.gamma {
        let report = BoostReport::unmodified(pair.full.clone(), Some(lsds));
        return Ok((pair.full, report));
    }
    let boosted: SupportSet = pair
        .full
        .support()
        .iter()
        .filter(|&t| pair.lsps(t) > cfg.epsilon)
        .collect();
    let post = if boosted.is_empty() {
        pair.full.clone()
    } else {
        boost(&pair.raw_full, &pair.full, &boosted, cfg.lambda, cfg.strategy)
    };
    let report = BoostReport {
        step: 0,
        lsds: Some(lsds),
        boosted_set: boosted,
        pre_dist: pair.full,
        post_dist: post.clone(),
        chosen: None,
        scenario: None,
        warning: None,
    };
    Ok((post, report))
}

/// Reweights the full-context distribution against the short-suffix one,
/// `p_full^(1+α) · max(p_short, 1e-6)^(−α)`, then applies `strategy`.
pub fn cad_weights(full: &TokenDistribution, short: &TokenDistribution, alpha: f64) -> Result<TokenDistribution, DistError> {
    let weights = full
        .probs()
        .iter()
        .zip(short.probs())
        .map(|(&f, &s)| {
            if f == 0.0 {
                0.0
            } else {
                f.powf(1.0 + alpha) * s.max(PROB_FLOOR).powf(-alpha)
            }
        })
        .collect();
    TokenDistribution::from_weights(weights)
}

pub fn cad_step<O: Oracle + ?Sized>(
    s: &[TokenId],
    alpha: f64,
    strategy: DecodingStrategy,
    short_len: usize,
    backend: &O,
) -> Result<TokenDistribution, BoostError> {
    Ok(cad_parts(s, alpha, strategy, short_len, backend)?.1)
}

/// Decoded full-context distribution and the CAD output.
fn cad_parts<O: Oracle + ?Sized>(
    s: &[TokenId],
    alpha: f64,
    strategy: DecodingStrategy,
    short_len: usize,
    backend: &O,
) -> Result<(TokenDistribution, TokenDistribution), BoostError> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(BoostError::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    strategy.validate()?;
    if short_len == 0 {
        return Err(BoostError::Config("short_len must be >= 1".into()));
    }
    let full = backend.next_token_distribution(&OracleRequest::full(s))?;
    let short = prefix_distribution(s, short_len.min(s.len()), backend)?;
    let cad = apply_strategy(&cad_weights(&full, &short, alpha)?, strategy)?;
    Ok((apply_strategy(&full, strategy)?, cad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Cad,
    Taboo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "vanilla",
            Method::Cad => "cad",
            Method::Taboo => "taboo",
        })
    }
}

impl FromStr for Method {
    type Err = BoostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "vanilla" => Ok(Method::Vanilla),
            "cad" => Ok(Method::Cad),
            "taboo" => Ok(Method::Taboo),
            other => Err(BoostError::Config(format!(
                "unknown method `{other}` (expected vanilla, cad or taboo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub boost: BoostConfig,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Newly generated tokens, excluding the prompt and any end token.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<BoostReport>,
    pub stopped_on_eos: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Autoregressive generation. Step `i` samples with seed `derive(seed, i)`.
///
/// `reference`, when given, holds the expected continuation; each step's
/// report then carries the boosting scenario for the expected token.
/// A backend failure ends the loop and is recorded in `error`.
pub fn generate<O: Oracle + ?Sized>(
    prompt: &[TokenId],
    max_new: usize,
    method: Method,
    cfg: &GenerationConfig,
    rng_seed: u64,
    backend: &O,
    reference: Option<&[TokenId]>,
) -> Result<Generation, BoostError> {
    if max_new == 0 {
        return Err(BoostError::Config("max_new must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(BoostError::Config("empty prompt".into()));
    }
    cfg.boost.validate()?;
    let eos = backend.eos_token();
    let mut context = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        steps: Vec::new(),
        stopped_on_eos: false,
        error: None,
    };
    for step in 0..max_new {
        let produced = match method {
            Method::Vanilla => backend
                .next_token_distribution(&OracleRequest::full(&context))
                .map_err(BoostError::from)
                .and_then(|raw| Ok(apply_strategy(&raw, cfg.boost.strategy)?))
                .map(|d| (d.clone(), BoostReport::unmodified(d, None))),
            Method::Cad => cad_parts(&context, cfg.alpha, cfg.boost.strategy, cfg.boost.short_len, backend).map(
                |(pre, post)| {
                    let mut r = BoostReport::unmodified(post.clone(), None);
                    r.pre_dist = pre;
                    (post, r)
                },
            ),
            Method::Taboo => taboo_step(&context, &cfg.boost, backend),
        };
        let (dist, mut report) = match produced {
            Ok(v) => v,
            Err(BoostError::Oracle(e)) => {
                out.error = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        debug_assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        let chosen = decoding::sample(&dist, seed::derive(rng_seed, step as u64));
        report.step = step;
        report.chosen = Some(chosen);
        if let Some(&t_hat) = reference.and_then(|r| r.get(step)) {
            report.scenario = Some(detection::scenario(t_hat, &report.boosted_set, &report.pre_dist));
        }
        out.steps.push(report);
        if Some(chosen) == eos {
            out.stopped_on_eos = true;
            break;
        }
        out.tokens.push(chosen);
        context.push(chosen);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist;
    use crate::oracle::MockOracle;

    fn switch(short: Vec<f64>, long: Vec<f64>) -> MockOracle {
        MockOracle::switch(
            33,
            TokenDistribution::new(short).unwrap(),
            TokenDistribution::new(long).unwrap(),
        )
        .unwrap()
    }

    fn cfg(lambda: f64, p: f64) -> BoostConfig {
        BoostConfig {
            strategy: DecodingStrategy::Nucleus(p),
            ..BoostConfig::with_lambda(lambda)
        }
    }

    #[test]
    fn hand_example() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let s = vec![0; 64];
        let (post, report) = taboo_step(&s, &cfg(2.0, 1.0), &m).unwrap();
        let lsds = report.lsds.unwrap();
        assert!((lsds - 0.301_862_217_783_987_46).abs() < 1e-14);
        assert!(lsds > detection::DEFAULT_GAMMA);
        assert_eq!(report.boosted_set.iter().collect::<Vec<_>>(), vec![1, 2]);
        for (got, want) in post.probs().iter().zip([1.0 / 9.0, 5.0 / 9.0, 3.0 / 9.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_returns_vanilla() {
        let m = switch(vec![0.2, 0.5, 0.3], vec![0.2, 0.5, 0.3]);
        let s = vec![0; 64];
        let (post, report) = taboo_step(&s, &cfg(5.0, 0.9), &m).unwrap();
        let raw = m.next_token_distribution(&OracleRequest::full(&s)).unwrap();
        assert_eq!(post, apply_strategy(&raw, DecodingStrategy::Nucleus(0.9)).unwrap());
        assert!(report.boosted_set.is_empty());
        assert_eq!(report.lsds, Some(0.0));
    }

    #[test]
    fn lambda_one_is_identity() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let s = vec![0; 64];
        let (post, report) = taboo_step(&s, &cfg(1.0, 0.9), &m).unwrap();
        assert!(!report.boosted_set.is_empty());
        assert_eq!(post, report.pre_dist);
    }

    #[test]
    fn boosting_reorders_within_the_nucleus() {
        // nucleus 0.7 over [0.5, 0.3, 0.2] keeps {0, 1}; token 1 overtakes
        // token 0 and token 2 stays out
        let m = switch(vec![0.7, 0.1, 0.2], vec![0.5, 0.3, 0.2]);
        let s = vec![0; 64];
        let (post, report) = taboo_step(&s, &cfg(10.0, 0.7), &m).unwrap();
        assert_eq!(report.boosted_set.iter().collect::<Vec<_>>(), vec![1]);
        assert!((post.prob(1) - 3.0 / 3.5).abs() < 1e-12);
        assert!((post.prob(0) - 0.5 / 3.5).abs() < 1e-12);
        assert_eq!(post.prob(2), 0.0);
    }

    #[test]
    fn short_context_falls_back_with_warning() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let (_, report) = taboo_step(&[0; 10], &cfg(2.0, 0.9), &m).unwrap();
        assert!(report.warning.is_some());
        assert!(report.lsds.is_none());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.5, 0.9).validate().is_err());
        assert!(BoostConfig { epsilon: 0.0, ..cfg(2.0, 0.9) }.validate().is_err());
        assert!(BoostConfig { gamma: f64::INFINITY, ..cfg(2.0, 0.9) }.validate().is_ok());
    }

    #[test]
    fn cad_closed_form() {
        let full = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        let short = TokenDistribution::new(vec![0.9, 0.1]).unwrap();
        let out = cad_weights(&full, &short, 1.0).unwrap();
        assert!((out.prob(0) - 0.1).abs() < 1e-12);
        assert!((out.prob(1) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn cad_alpha_zero() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let s = vec![0; 64];
        let strategy = DecodingStrategy::Nucleus(0.9);
        let out = cad_step(&s, 0.0, strategy, 32, &m).unwrap();
        let raw = m.next_token_distribution(&OracleRequest::full(&s)).unwrap();
        let want = apply_strategy(&raw, strategy).unwrap();
        assert!(dist::tvd(&out, &want).unwrap() < 1e-12);
        assert!(cad_step(&s, -1.0, strategy, 32, &m).is_err());
    }

    #[test]
    fn point_mass_generation_ignores_seed() {
        let m = MockOracle::planted(20, 1, 7, 1.0).unwrap();
        let g = GenerationConfig {
            boost: cfg(2.0, 0.9),
            alpha: DEFAULT_ALPHA,
        };
        for seed in [0, 1, 99] {
            let out = generate(&[1, 2, 3], 4, Method::Vanilla, &g, seed, &m, None).unwrap();
            assert_eq!(out.tokens, vec![7; 4]);
            assert_eq!(out.steps.len(), 4);
        }
    }

    #[test]
    fn generation_stops_at_eos() {
        let m = MockOracle::planted(20, 1, 0, 1.0).unwrap().with_eos(Some(0));
        let g = GenerationConfig {
            boost: cfg(2.0, 0.9),
            alpha: DEFAULT_ALPHA,
        };
        let out = generate(&[1, 2], 10, Method::Cad, &g, 3, &m, None).unwrap();
        assert!(out.tokens.is_empty());
        assert!(out.stopped_on_eos);
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn taboo_with_closed_gate_matches_vanilla() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let open = GenerationConfig {
            boost: BoostConfig { gamma: f64::INFINITY, ..cfg(3.0, 0.9) },
            alpha: DEFAULT_ALPHA,
        };
        let prompt = vec![0; 40];
        let a = generate(&prompt, 20, Method::Taboo, &open, 42, &m, None).unwrap();
        let b = generate(&prompt, 20, Method::Vanilla, &open, 42, &m, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let c = generate(&prompt, 20, Method::Taboo, &open, 42, &m, None).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn reference_tokens_yield_scenarios() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let g = GenerationConfig {
            boost: cfg(2.0, 1.0),
            alpha: DEFAULT_ALPHA,
        };
        let out = generate(&[0; 64], 1, Method::Taboo, &g, 1, &m, Some(&[1])).unwrap();
        assert_eq!(out.steps[0].scenario, Some(Scenario::Best));
        let out = generate(&[0; 64], 1, Method::Taboo, &g, 1, &m, Some(&[0])).unwrap();
        assert_eq!(out.steps[0].scenario, Some(Scenario::Worst));
    }

    #[test]
    fn report_json_round_trip() {
        let m = switch(vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]);
        let (_, report) = taboo_step(&[0; 64], &cfg(2.0, 1.0), &m).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: BoostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
