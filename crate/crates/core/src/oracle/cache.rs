use std::num::NonZeroUsize;

use lru::LruCache;
use parking_lot::Mutex;

use super::{Oracle, OracleError, OracleRequest, Truncation};
use crate::dist::{TokenDistribution, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Suffix(Vec<TokenId>),
    Masked(Vec<TokenId>, usize),
}

/// LRU cache in front of a backend, keyed on the exact token prefix that
/// was presented.
///
/// The lock is not held during upstream calls, so two threads missing on the
/// same key may both call the backend; both results are identical for any
/// deterministic backend.
pub struct CachedOracle<O> {
    inner: O,
    entries: Mutex<LruCache<Key, TokenDistribution>>,
}

impl<O: Oracle> CachedOracle<O> {
    pub fn new(inner: O, capacity: NonZeroUsize) -> Self {
        Self {
            inner,
            entries: Mutex::new(LruCache::new(capacity)),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup_or(
        &self,
        key: Key,
        fetch: impl FnOnce() -> Result<TokenDistribution, OracleError>,
    ) -> Result<TokenDistribution, OracleError> {
        if let Some(hit) = self.entries.lock().get(&key) {
            return Ok(hit.clone());
        }
        let dist = fetch()?;
        self.entries.lock().put(key, dist.clone());
        Ok(dist)
    }
}

impl<O: Oracle> Oracle for CachedOracle<O> {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        self.inner.vocab_size()
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        self.lookup_or(Key::Suffix(req.tokens.clone()), || {
            self.inner.next_token_distribution(req)
        })
    }

    fn truncation(&self) -> Truncation {
        self.inner.truncation()
    }

    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        self.lookup_or(Key::Masked(full.to_vec(), window), || {
            self.inner.masked_distribution(full, window)
        })
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
