use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::vocab::WordVocab;
use super::{Oracle, OracleError, OracleRequest, Truncation};
use crate::dist::{TokenDistribution, TokenId};

/// One row of an n-gram mock: the distribution emitted when the request ends
/// with `context`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramEntry {
    pub context: Vec<TokenId>,
    pub probs: TokenDistribution,
}

/// Test doubles whose outputs make probe results analytically forced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockOracleSpec {
    /// Confident on `answer_token` once at least `dependency_length` tokens
    /// are visible, uniform otherwise.
    PlantedDependency {
        vocab_size: usize,
        dependency_length: usize,
        answer_token: TokenId,
        confident_prob: f64,
    },
    /// Table lookup on the last `order` tokens; uniform when nothing matches.
    Ngram {
        vocab_size: usize,
        order: usize,
        table: Vec<NgramEntry>,
    },
    /// Emits `short` below `dependency_length` visible tokens and `long` from
    /// there on.
    Switch {
        dependency_length: usize,
        short: TokenDistribution,
        long: TokenDistribution,
    },
    /// Induction-style copier: if the visible prefix contains `marker`
    /// followed by some token, predict that token with `confident_prob`;
    /// otherwise predict `fallback` with the same confidence. A corpus that
    /// places the marker `d` tokens from the end gives every sequence its own
    /// dependency length.
    Marker {
        vocab_size: usize,
        marker: TokenId,
        fallback: TokenId,
        confident_prob: f64,
    },
}

impl MockOracleSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            MockOracleSpec::PlantedDependency { vocab_size, .. }
            | MockOracleSpec::Ngram { vocab_size, .. }
            | MockOracleSpec::Marker { vocab_size, .. } => *vocab_size,
            MockOracleSpec::Switch { long, .. } => long.vocab_size(),
        }
    }

    fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::Request(m));
        let v = self.vocab_size();
        if v == 0 {
            return bad("vocab_size must be positive".into());
        }
        match self {
            MockOracleSpec::PlantedDependency {
                dependency_length,
                answer_token,
                confident_prob,
                ..
            } => {
                if *dependency_length == 0 {
                    return bad("dependency_length must be >= 1".into());
                }
                if *answer_token as usize >= v {
                    return bad(format!("answer_token {answer_token} outside vocabulary"));
                }
                if !(*confident_prob > 0.5 && *confident_prob <= 1.0) {
                    return bad(format!("confident_prob {confident_prob} not in (0.5, 1]"));
                }
            }
            MockOracleSpec::Ngram { order, table, .. } => {
                if *order == 0 {
                    return bad("ngram order must be >= 1".into());
                }
                for e in table {
                    if e.context.len() != *order || e.probs.vocab_size() != v {
                        return bad("ngram entry does not match order/vocabulary".into());
                    }
                }
            }
            MockOracleSpec::Switch {
                dependency_length,
                short,
                long,
            } => {
                if *dependency_length == 0 {
                    return bad("dependency_length must be >= 1".into());
                }
                if short.vocab_size() != long.vocab_size() {
                    return bad("short and long distributions differ in size".into());
                }
            }
            MockOracleSpec::Marker {
                marker,
                fallback,
                confident_prob,
                ..
            } => {
                if *marker as usize >= v || *fallback as usize >= v {
                    return bad("marker/fallback outside vocabulary".into());
                }
                if !(*confident_prob > 0.5 && *confident_prob <= 1.0) {
                    return bad(format!("confident_prob {confident_prob} not in (0.5, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Parses the compact `kind:key=value,...` form used on the command line,
/// e.g. `planted:d=40,answer=5,p=0.9,vocab=50` or
/// `marker:vocab=128,marker=3,fallback=4,p=0.95`.
impl FromStr for MockOracleSpec {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::HashMap::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| OracleError::Request(format!("expected key=value, got `{part}`")))?;
            kv.insert(k.trim(), v.trim());
        }
        fn get<T: FromStr>(
            kv: &std::collections::HashMap<&str, &str>,
            key: &str,
            default: Option<T>,
        ) -> Result<T, OracleError> {
            match kv.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| OracleError::Request(format!("bad value for `{key}`: {v}"))),
                None => default.ok_or_else(|| OracleError::Request(format!("missing `{key}`"))),
            }
        }
        let spec = match kind {
            "planted" | "planted_dependency" => MockOracleSpec::PlantedDependency {
                vocab_size: get(&kv, "vocab", Some(50))?,
                dependency_length: get(&kv, "d", None)?,
                answer_token: get(&kv, "answer", Some(5))?,
                confident_prob: get(&kv, "p", Some(0.9))?,
            },
            "marker" => {
                let vocab_size: usize = get(&kv, "vocab", Some(WordVocab::builtin().len() + 1))?;
                MockOracleSpec::Marker {
                    vocab_size,
                    marker: get(&kv, "marker", Some(vocab_size.saturating_sub(1) as TokenId))?,
                    fallback: get(&kv, "fallback", Some(super::vocab::UNK))?,
                    confident_prob: get(&kv, "p", Some(0.95))?,
                }
            }
            other => {
                return Err(OracleError::Request(format!(
                    "unknown mock kind `{other}` (expected planted or marker)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Deterministic backend driven by a [`MockOracleSpec`].
#[derive(Debug, Clone)]
pub struct MockOracle {
    spec: MockOracleSpec,
    vocab: WordVocab,
    eos: Option<TokenId>,
}

impl MockOracle {
    pub fn new(spec: MockOracleSpec) -> Result<Self, OracleError> {
        spec.validate()?;
        Ok(Self {
            spec,
            vocab: WordVocab::builtin(),
            eos: None,
        })
    }

    pub fn planted(
        vocab_size: usize,
        dependency_length: usize,
        answer_token: TokenId,
        confident_prob: f64,
    ) -> Result<Self, OracleError> {
        Self::new(MockOracleSpec::PlantedDependency {
            vocab_size,
            dependency_length,
            answer_token,
            confident_prob,
        })
    }

    pub fn switch(
        dependency_length: usize,
        short: TokenDistribution,
        long: TokenDistribution,
    ) -> Result<Self, OracleError> {
        Self::new(MockOracleSpec::Switch {
            dependency_length,
            short,
            long,
        })
    }

    pub fn with_eos(mut self, eos: Option<TokenId>) -> Self {
        self.eos = eos;
        self
    }

    pub fn spec(&self) -> &MockOracleSpec {
        &self.spec
    }

    fn distribution(&self, tokens: &[TokenId]) -> Result<TokenDistribution, OracleError> {
        let visible = tokens.len();
        let dist = match &self.spec {
            MockOracleSpec::PlantedDependency {
                vocab_size,
                dependency_length,
                answer_token,
                confident_prob,
            } => {
                if visible >= *dependency_length {
                    TokenDistribution::peaked(*vocab_size, *answer_token, *confident_prob)?
                } else {
                    TokenDistribution::uniform(*vocab_size)?
                }
            }
            MockOracleSpec::Ngram {
                vocab_size,
                order,
                table,
            } => {
                let hit = (visible >= *order)
                    .then(|| &tokens[visible - order..])
                    .and_then(|ctx| table.iter().find(|e| e.context == ctx));
                match hit {
                    Some(e) => e.probs.clone(),
                    None => TokenDistribution::uniform(*vocab_size)?,
                }
            }
            MockOracleSpec::Switch {
                dependency_length,
                short,
                long,
            } => {
                if visible >= *dependency_length {
                    long.clone()
                } else {
                    short.clone()
                }
            }
            MockOracleSpec::Marker {
                vocab_size,
                marker,
                fallback,
                confident_prob,
            } => {
                let copied = tokens
                    .iter()
                    .rposition(|t| t == marker)
                    .and_then(|i| tokens.get(i + 1).copied());
                TokenDistribution::peaked(*vocab_size, copied.unwrap_or(*fallback), *confident_prob)?
            }
        };
        Ok(dist)
    }
}

impl Oracle for MockOracle {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        Ok(self.spec.vocab_size())
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        req.validate(self.spec.vocab_size())?;
        self.distribution(&req.tokens)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.eos
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, OracleError> {
        if self.vocab.len() > self.spec.vocab_size() {
            return Err(OracleError::Unsupported(
                "tokenize: mock vocabulary smaller than the word lexicon",
            ));
        }
        Ok(self.vocab.tokenize(text))
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, OracleError> {
        Ok(self.vocab.detokenize(tokens))
    }
}

/// Adds a fixed cost plus a per-token cost to every call of the wrapped
/// backend. Used to benchmark detection overhead against a known model.
pub struct LatencyOracle<O> {
    inner: O,
    base: Duration,
    per_token: Duration,
}

impl<O: Oracle> LatencyOracle<O> {
    pub fn new(inner: O, base: Duration, per_token: Duration) -> Self {
        Self {
            inner,
            base,
            per_token,
        }
    }

    fn pause(&self, tokens: usize) {
        let d = self.base + self.per_token.mul_f64(tokens as f64);
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

impl<O: Oracle> Oracle for LatencyOracle<O> {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        self.inner.vocab_size()
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        self.pause(req.tokens.len());
        self.inner.next_token_distribution(req)
    }

    fn truncation(&self) -> Truncation {
        self.inner.truncation()
    }

    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        self.pause(full.len());
        self.inner.masked_distribution(full, window)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.inner.eos_token()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, OracleError> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, OracleError> {
        self.inner.detokenize(tokens)
    }
}
