//! Decoding strategies: truncate a raw next-token distribution to a
//! candidate set and renormalize it into a sampling distribution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{DistError, TokenDistribution, TokenId};
use crate::seed;

/// Slack applied to the cumulative-mass comparison of nucleus truncation, so
/// a prefix whose mass equals `p` up to rounding still counts as covering.
const NUCLEUS_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("top-k requires k >= 1")]
    InvalidK,
    #[error("nucleus requires p in (0, 1], got {0}")]
    InvalidP(f64),
    #[error("adaptive requires epsilon > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("unrecognized strategy `{0}` (expected greedy, topk:K, nucleus:P or adaptive:EPS)")]
    Parse(String),
    #[error("confidence needs a vocabulary of at least 2 tokens")]
    VocabTooSmall,
}

/// A truncation rule applied to the model's raw distribution before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DecodingStrategy {
    /// Equivalent to `TopK(1)`.
    Greedy,
    TopK(usize),
    /// Smallest probability-sorted prefix whose mass reaches `p`.
    Nucleus(f64),
    /// Probability-sorted prefix up to the last token with probability at
    /// least `epsilon`.
    Adaptive(f64),
}

impl Default for DecodingStrategy {
    fn default() -> Self {
        DecodingStrategy::Nucleus(0.9)
    }
}

impl DecodingStrategy {
    pub fn validate(&self) -> Result<(), StrategyError> {
        match *self {
            DecodingStrategy::Greedy => Ok(()),
            DecodingStrategy::TopK(k) if k >= 1 => Ok(()),
            DecodingStrategy::TopK(_) => Err(StrategyError::InvalidK),
            DecodingStrategy::Nucleus(p) if p > 0.0 && p <= 1.0 => Ok(()),
            DecodingStrategy::Nucleus(p) => Err(StrategyError::InvalidP(p)),
            DecodingStrategy::Adaptive(e) if e > 0.0 && e.is_finite() => Ok(()),
            DecodingStrategy::Adaptive(e) => Err(StrategyError::InvalidEpsilon(e)),
        }
    }

    /// Filesystem-friendly label, e.g. `nucleus-0.9`.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for DecodingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodingStrategy::Greedy => write!(f, "greedy"),
            DecodingStrategy::TopK(k) => write!(f, "topk:{k}"),
            DecodingStrategy::Nucleus(p) => write!(f, "nucleus:{p}"),
            DecodingStrategy::Adaptive(e) => write!(f, "adaptive:{e}"),
        }
    }
}

impl FromStr for DecodingStrategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parse_err = || StrategyError::Parse(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let strategy = match (name.to_ascii_lowercase().as_str(), arg) {
            ("greedy", None) => DecodingStrategy::Greedy,
            ("topk" | "top_k", Some(a)) => {
                DecodingStrategy::TopK(a.parse().map_err(|_| parse_err())?)
            }
            ("nucleus" | "top_p", Some(a)) => {
                DecodingStrategy::Nucleus(a.parse().map_err(|_| parse_err())?)
            }
            ("adaptive", Some(a)) => {
                DecodingStrategy::Adaptive(a.parse().map_err(|_| parse_err())?)
            }
            _ => return Err(parse_err()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl TryFrom<String> for DecodingStrategy {
    type Error = StrategyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<DecodingStrategy> for String {
    fn from(s: DecodingStrategy) -> Self {
        s.to_string()
    }
}

/// Token ids sorted by descending probability, ties by ascending id.
pub fn ranked_tokens(probs: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..probs.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        probs[b as usize]
            .total_cmp(&probs[a as usize])
            .then(a.cmp(&b))
    });
    ids
}

/// Ids kept by `strategy`, in rank order.
pub fn selected_tokens(
    raw: &TokenDistribution,
    strategy: DecodingStrategy,
) -> Result<Vec<TokenId>, StrategyError> {
    strategy.validate()?;
    let probs = raw.probs();
    let ranked: Vec<TokenId> = ranked_tokens(probs)
        .into_iter()
        .take_while(|&t| probs[t as usize] > 0.0)
        .collect();
    let keep = match strategy {
        DecodingStrategy::Greedy => 1,
        DecodingStrategy::TopK(k) => k,
        DecodingStrategy::Nucleus(p) => {
            let mut cum = 0.0;
            let mut n = ranked.len();
            for (i, &t) in ranked.iter().enumerate() {
                cum += probs[t as usize];
                if cum >= p - NUCLEUS_SLACK {
                    n = i + 1;
                    break;
                }
            }
            n
        }
        DecodingStrategy::Adaptive(eps) => ranked
            .iter()
            .rposition(|&t| probs[t as usize] >= eps)
            .map_or(1, |i| i + 1),
    };
    Ok(ranked.into_iter().take(keep.max(1)).collect())
}

/// Zeroes every token outside `keep` and renormalizes the rest.
pub fn restrict(raw: &TokenDistribution, keep: &[TokenId]) -> Result<TokenDistribution, DistError> {
    let probs = raw.probs();
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &t in keep {
        mass += probs[t as usize];
    }
    if mass <= 0.0 {
        return Err(DistError::ZeroMass);
    }
    for &t in keep {
        out[t as usize] = probs[t as usize] / mass;
    }
    Ok(TokenDistribution::from_raw_unchecked(out))
}

/// The decoded sampling distribution `φ(raw)`.
pub fn apply_strategy(
    raw: &TokenDistribution,
    strategy: DecodingStrategy,
) -> Result<TokenDistribution, StrategyError> {
    let keep = selected_tokens(raw, strategy)?;
    // `keep` only contains positive-probability tokens, so the mass is > 0.
    Ok(restrict(raw, &keep).expect("selected tokens carry positive mass"))
}

/// Most probable token; ties go to the lowest id.
pub fn top1(raw: &TokenDistribution) -> TokenId {
    let mut best = 0usize;
    for (i, &p) in raw.probs().iter().enumerate().skip(1) {
        if p > raw.probs()[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Probability gap between the two highest-ranked tokens.
pub fn confidence(raw: &TokenDistribution) -> Result<f64, StrategyError> {
    if raw.vocab_size() < 2 {
        return Err(StrategyError::VocabTooSmall);
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in raw.probs() {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((first - second).clamp(0.0, 1.0))
}

/// Draws a token by inverse CDF over token-id order.
pub fn sample(dist: &TokenDistribution, rng_seed: u64) -> TokenId {
    let u: f64 = seed::rng(rng_seed).random();
    sample_with_uniform(dist, u)
}

/// Inverse-CDF lookup for a given uniform draw `u ∈ [0, 1)`.
pub fn sample_with_uniform(dist: &TokenDistribution, u: f64) -> TokenId {
    let mut cum = 0.0;
    let mut last_positive = 0usize;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        cum += p;
        if u < cum {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> TokenDistribution {
        TokenDistribution::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        let out = apply_strategy(&d(&[0.5, 0.3, 0.15, 0.05]), DecodingStrategy::Nucleus(0.9)).unwrap();
        let expect = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        assert!(close(out.probs(), &expect, 1e-12), "{:?}", out.probs());
        assert_eq!(out.probs()[3], 0.0);
    }

    #[test]
    fn nucleus_exact_boundary_is_covering() {
        // 0.5 + 0.4 reaches p = 0.9 exactly; the third token is not needed.
        let out = apply_strategy(&d(&[0.5, 0.4, 0.1]), DecodingStrategy::Nucleus(0.9)).unwrap();
        assert_eq!(out.probs()[2], 0.0);
    }

    #[test]
    fn top_k_and_greedy() {
        let out = apply_strategy(&d(&[0.5, 0.3, 0.2]), DecodingStrategy::TopK(2)).unwrap();
        assert!(close(out.probs(), &[0.625, 0.375, 0.0], 1e-15));
        let g = apply_strategy(&d(&[0.2, 0.5, 0.3]), DecodingStrategy::Greedy).unwrap();
        assert_eq!(g.probs(), &[0.0, 1.0, 0.0]);
        let k1 = apply_strategy(&d(&[0.2, 0.5, 0.3]), DecodingStrategy::TopK(1)).unwrap();
        assert_eq!(g, k1);
    }

    #[test]
    fn top_k_never_selects_zero_mass() {
        let out = apply_strategy(&d(&[0.0, 1.0, 0.0]), DecodingStrategy::TopK(3)).unwrap();
        assert_eq!(out.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn adaptive_cuts_below_epsilon() {
        let out = apply_strategy(&d(&[0.6, 0.3995, 0.0005]), DecodingStrategy::Adaptive(0.001)).unwrap();
        assert_eq!(out.probs()[2], 0.0);
        assert!(close(&out.probs()[..2], &[0.6 / 0.9995, 0.3995 / 0.9995], 1e-15));
        // everything below epsilon still keeps the argmax
        let out = apply_strategy(&d(&[0.5, 0.5]), DecodingStrategy::Adaptive(0.9)).unwrap();
        assert_eq!(out.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let p = d(&[1.0]);
        assert_eq!(apply_strategy(&p, DecodingStrategy::TopK(0)), Err(StrategyError::InvalidK));
        assert!(apply_strategy(&p, DecodingStrategy::Nucleus(0.0)).is_err());
        assert!(apply_strategy(&p, DecodingStrategy::Nucleus(1.5)).is_err());
        assert!(apply_strategy(&p, DecodingStrategy::Adaptive(-1.0)).is_err());
    }

    #[test]
    fn parse_and_display() {
        for (text, s) in [
            ("greedy", DecodingStrategy::Greedy),
            ("topk:5", DecodingStrategy::TopK(5)),
            ("nucleus:0.9", DecodingStrategy::Nucleus(0.9)),
            ("adaptive:0.001", DecodingStrategy::Adaptive(0.001)),
        ] {
            assert_eq!(text.parse::<DecodingStrategy>().unwrap(), s);
            assert_eq!(s.to_string(), text);
        }
        assert!("nucleus".parse::<DecodingStrategy>().is_err());
        assert!("topk:0".parse::<DecodingStrategy>().is_err());
        assert!("beam:4".parse::<DecodingStrategy>().is_err());
        assert_eq!(DecodingStrategy::Nucleus(0.9).slug(), "nucleus-0.9");
    }

    #[test]
    fn top1_and_confidence() {
        assert_eq!(top1(&d(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(top1(&d(&[0.5, 0.5])), 0);
        assert_eq!(top1(&TokenDistribution::point_mass(9, 4).unwrap()), 4);

        assert!((confidence(&d(&[0.6, 0.3, 0.1])).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(confidence(&TokenDistribution::uniform(7).unwrap()).unwrap(), 0.0);
        assert_eq!(confidence(&TokenDistribution::point_mass(4, 2).unwrap()).unwrap(), 1.0);
        assert_eq!(confidence(&d(&[1.0])), Err(StrategyError::VocabTooSmall));
    }

    #[test]
    fn sampling_is_deterministic() {
        let pm = TokenDistribution::point_mass(10, 7).unwrap();
        for s in 0..50 {
            assert_eq!(sample(&pm, s), 7);
        }
        let half = d(&[0.5, 0.5]);
        for s in 0..50 {
            assert_eq!(sample(&half, s), sample(&half, s));
        }
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let dist = d(&[0.25, 0.75]);
        let n = 100_000u64;
        let ones = (0..n).filter(|&s| sample(&dist, seed::derive(99, s)) == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn inverse_cdf_skips_zero_entries() {
        let dist = d(&[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(sample_with_uniform(&dist, 0.0), 1);
        assert_eq!(sample_with_uniform(&dist, 0.49), 1);
        assert_eq!(sample_with_uniform(&dist, 0.5), 3);
        assert_eq!(sample_with_uniform(&dist, 0.999_999_999), 3);
    }
}
