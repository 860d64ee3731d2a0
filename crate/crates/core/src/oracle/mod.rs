//! Next-token distribution oracles.
//!
//! An [`Oracle`] answers one question: given a token prefix, what is the
//! model's distribution over the next token? Everything else in the crate is
//! built on top of that call. Backends range from deterministic mocks, whose
//! answers make probe results analytically forced, to HTTP clients for live
//! inference servers.

mod cache;
pub mod http;
mod mock;
mod vocab;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{DistError, TokenDistribution, TokenId};

pub use cache::CachedOracle;
pub use http::{BackendEndpoint, HttpOracle, OpenAiCompletionOracle, TopLogprobs};
pub use mock::{LatencyOracle, MockOracle, MockOracleSpec, NgramEntry};
pub use vocab::WordVocab;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("backend transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("invalid request: {0}")]
    Request(String),
    #[error("backend returned malformed data: {0}")]
    Protocol(String),
    #[error("operation not supported by this backend: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl OracleError {
    pub fn is_transport(&self) -> bool {
        matches!(self, OracleError::Transport { .. })
    }
}

/// How a backend realizes a truncated context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Only the last `ℓ` tokens are sent; positions restart at zero.
    Literal,
    /// The full sequence is sent and attention is restricted to the last `ℓ`
    /// tokens, keeping the original positions.
    Masked,
}

/// The prefix actually presented to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRequest {
    pub tokens: Vec<TokenId>,
    /// Length of the sequence this prefix was cut from.
    pub full_length: usize,
}

impl OracleRequest {
    pub fn full(tokens: &[TokenId]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            full_length: tokens.len(),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), OracleError> {
        if self.tokens.is_empty() {
            return Err(OracleError::Request("empty token prefix".into()));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(OracleError::Request(format!(
                "token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

pub trait Oracle: Send + Sync {
    fn vocab_size(&self) -> Result<usize, OracleError>;

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError>;

    fn truncation(&self) -> Truncation {
        Truncation::Literal
    }

    /// Distribution for `full` with attention limited to its last `window`
    /// tokens. Backends without masking support fall back to literal
    /// truncation.
    fn masked_distribution(
        &self,
        full: &[TokenId],
        window: usize,
    ) -> Result<TokenDistribution, OracleError> {
        let start = full.len().saturating_sub(window);
        self.next_token_distribution(&OracleRequest {
            tokens: full[start..].to_vec(),
            full_length: full.len(),
        })
    }

    /// Terminator token, if the backend has one.
    fn eos_token(&self) -> Option<TokenId> {
        None
    }

    fn tokenize(&self, _text: &str) -> Result<Vec<TokenId>, OracleError> {
        Err(OracleError::Unsupported("tokenize"))
    }

    fn detokenize(&self, _tokens: &[TokenId]) -> Result<String, OracleError> {
        Err(OracleError::Unsupported("detokenize"))
    }
}

impl<O: Oracle + ?Sized> Oracle for Arc<O> {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        (**self).vocab_size()
    }
    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        (**self).next_token_distribution(req)
    }
    fn truncation(&self) -> Truncation {
        (**self).truncation()
    }
    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        (**self).masked_distribution(full, window)
    }
    fn eos_token(&self) -> Option<TokenId> {
        (**self).eos_token()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, OracleError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, OracleError> {
        (**self).detokenize(tokens)
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        (**self).vocab_size()
    }
    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        (**self).next_token_distribution(req)
    }
    fn truncation(&self) -> Truncation {
        (**self).truncation()
    }
    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        (**self).masked_distribution(full, window)
    }
    fn eos_token(&self) -> Option<TokenId> {
        (**self).eos_token()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, OracleError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, OracleError> {
        (**self).detokenize(tokens)
    }
}

/// Next-token distribution given only the last `ell` tokens of `s`.
///
/// `ell == s.len()` issues exactly the full-context request.
pub fn prefix_distribution<O: Oracle + ?Sized>(
    s: &[TokenId],
    ell: usize,
    backend: &O,
) -> Result<TokenDistribution, OracleError> {
    if ell == 0 || ell > s.len() {
        return Err(OracleError::Request(format!(
            "prefix length {ell} outside 1..={}",
            s.len()
        )));
    }
    if ell == s.len() {
        return backend.next_token_distribution(&OracleRequest::full(s));
    }
    match backend.truncation() {
        Truncation::Masked => backend.masked_distribution(s, ell),
        Truncation::Literal => backend.next_token_distribution(&OracleRequest {
            tokens: s[s.len() - ell..].to_vec(),
            full_length: s.len(),
        }),
    }
}

/// Counts upstream calls; used to verify caching and to instrument runs.
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicU64,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        self.inner.vocab_size()
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.next_token_distribution(req)
    }

    fn truncation(&self) -> Truncation {
        self.inner.truncation()
    }

    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
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
