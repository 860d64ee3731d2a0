//! Probability vectors over a vocabulary and the divergences used to compare
//! them.
//!
//! Every analysis in this crate reduces to comparing two next-token
//! distributions, so this module is deliberately dependency free: plain
//! linear scans over `f64` slices, which is fast enough for vocabularies in
//! the low hundreds of thousands.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a vocabulary entry.
pub type TokenId = u32;

/// Absolute tolerance on `Σ p = 1` accepted by [`TokenDistribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Logarithm base used by [`kl`] and [`jsd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Natural,
    Two,
}

impl LogBase {
    fn ln_scale(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
        }
    }
}

/// Base used by every divergence in the crate. Thresholds such as the LSDS
/// cut-offs are expressed in this base.
pub const LOG_BASE: LogBase = LogBase::Natural;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("incompatible vocabularies: {left} vs {right} entries")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty distribution")]
    Empty,
    #[error("entry {index} is not a finite non-negative probability: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("all weights are zero")]
    ZeroMass,
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// A probability vector indexed by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        validate_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, DistError> {
        validate_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(DistError::ZeroMass);
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Result<Self, DistError> {
        if vocab_size == 0 {
            return Err(DistError::Empty);
        }
        Ok(Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        })
    }

    pub fn point_mass(vocab_size: usize, token: TokenId) -> Result<Self, DistError> {
        if token as usize >= vocab_size {
            return Err(DistError::TokenOutOfRange { token, vocab_size });
        }
        let mut probs = vec![0.0; vocab_size];
        probs[token as usize] = 1.0;
        Ok(Self { probs })
    }

    /// `mass` on `token`, the remainder spread evenly over the other entries.
    pub fn peaked(vocab_size: usize, token: TokenId, mass: f64) -> Result<Self, DistError> {
        if token as usize >= vocab_size {
            return Err(DistError::TokenOutOfRange { token, vocab_size });
        }
        if !(0.0..=1.0).contains(&mass) {
            return Err(DistError::InvalidEntry {
                index: token as usize,
                value: mass,
            });
        }
        if vocab_size == 1 {
            return Self::point_mass(1, token);
        }
        let rest = (1.0 - mass) / (vocab_size - 1) as f64;
        let mut probs = vec![rest; vocab_size];
        probs[token as usize] = mass;
        Ok(Self { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Token ids with non-zero probability.
    pub fn support(&self) -> SupportSet {
        SupportSet::from_iter(
            self.probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(i, _)| i as TokenId),
        )
    }

    /// Non-zero entries as `(token, prob)` pairs, for compact serialization.
    pub fn sparse(&self) -> Vec<(TokenId, f64)> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as TokenId, p))
            .collect()
    }

    pub(crate) fn from_raw_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = DistError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

fn validate_entries(values: &[f64]) -> Result<(), DistError> {
    if values.is_empty() {
        return Err(DistError::Empty);
    }
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DistError::InvalidEntry { index, value });
        }
    }
    Ok(())
}

fn check_dims(a: &TokenDistribution, b: &TokenDistribution) -> Result<(), DistError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(DistError::DimensionMismatch {
            left: a.vocab_size(),
            right: b.vocab_size(),
        });
    }
    Ok(())
}

/// `x · ln(x / y)` with `0 · ln 0 := 0`.
#[inline]
fn xlogx_over_y(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Kullback–Leibler divergence `Σ p_t log(p_t / q_t)`.
///
/// Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64, DistError> {
    kl_with_base(p, q, LOG_BASE)
}

pub fn kl_with_base(
    p: &TokenDistribution,
    q: &TokenDistribution,
    base: LogBase,
) -> Result<f64, DistError> {
    check_dims(p, q)?;
    let mut total = 0.0;
    for (&pt, &qt) in p.probs.iter().zip(&q.probs) {
        if pt == 0.0 {
            continue;
        }
        if qt == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += xlogx_over_y(pt, qt);
    }
    Ok(total / base.ln_scale())
}

/// Jensen–Shannon distance: the square root of the mean KL divergence of
/// each input to their midpoint.
///
/// Each coordinate's contribution is computed as a commutative sum, so the
/// result is bitwise symmetric in its arguments.
pub fn jsd(p1: &TokenDistribution, p2: &TokenDistribution) -> Result<f64, DistError> {
    jsd_with_base(p1, p2, LOG_BASE)
}

pub fn jsd_with_base(
    p1: &TokenDistribution,
    p2: &TokenDistribution,
    base: LogBase,
) -> Result<f64, DistError> {
    check_dims(p1, p2)?;
    let mut total = 0.0;
    for (&a, &b) in p1.probs.iter().zip(&p2.probs) {
        if a == 0.0 && b == 0.0 {
            continue;
        }
        let m = 0.5 * (a + b);
        total += xlogx_over_y(a, m) + xlogx_over_y(b, m);
    }
    // rounding can push disjoint supports a hair past the bound
    let bound = std::f64::consts::LN_2 / base.ln_scale();
    let divergence = (0.5 * total / base.ln_scale()).clamp(0.0, bound);
    Ok(divergence.sqrt())
}

/// Largest value [`jsd`] can take under [`LOG_BASE`].
pub fn jsd_max() -> f64 {
    (std::f64::consts::LN_2 / LOG_BASE.ln_scale()).sqrt()
}

/// Total variation distance `½ ‖p1 − p2‖₁`.
pub fn tvd(p1: &TokenDistribution, p2: &TokenDistribution) -> Result<f64, DistError> {
    check_dims(p1, p2)?;
    let l1: f64 = p1
        .probs
        .iter()
        .zip(&p2.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * l1).min(1.0))
}

/// Set of token ids, typically the support of a decoded distribution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupportSet(BTreeSet<TokenId>);

impl SupportSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: TokenId) -> bool {
        self.0.insert(token)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.0.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &SupportSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl FromIterator<TokenId> for SupportSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for SupportSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "}}")
    }
}

/// Recall, precision and F1 of a predicted support `P` against a reference
/// support `Q`. `None` marks a ratio with an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: f64,
}

pub fn set_metrics(p: &SupportSet, q: &SupportSet) -> SetScores {
    let overlap = p.intersection_len(q) as f64;
    let recall = (!q.is_empty()).then(|| overlap / q.len() as f64);
    let precision = (!p.is_empty()).then(|| overlap / p.len() as f64);
    let f1 = match (recall, precision) {
        (Some(r), Some(pr)) if r > 0.0 && pr > 0.0 => 2.0 * r * pr / (r + pr),
        _ => 0.0,
    };
    SetScores {
        recall,
        precision,
        f1,
    }
}

/// Result of fitting `y = a · x^(−b)` by least squares in log-log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    /// Decay exponent `b` (positive for a decreasing law).
    pub b_hat: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    /// The log-log slope, i.e. `−b_hat`. Histogram reports quote the exponent
    /// in this form, so a short-context-dominated histogram shows a strongly
    /// negative value.
    pub fn signed_exponent(&self) -> f64 {
        -self.b_hat
    }
}

/// Ordinary least squares on `(ln x, ln y)`. Points with a non-positive
/// coordinate are dropped before fitting.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, DistError> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return Err(DistError::InsufficientData(format!(
            "{} usable point(s), need at least 2",
            logs.len()
        )));
    }
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &logs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(DistError::InsufficientData(
            "all x values are identical".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = logs
        .iter()
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(PowerLawFit {
        a: intercept.exp(),
        b_hat: -slope,
        r_squared,
    })
}
