//! HTTP backends.
//!
//! The native protocol is three JSON POST endpoints under a base URL:
//!
//! ```text
//! POST {base}/v1/next_logprobs  {"tokens":[int],"top":int|"full"}
//!                            -> {"logprobs":[{"id":int,"logprob":float}],"vocab_size":int}
//! POST {base}/v1/tokenize       {"text":str}      -> {"tokens":[int]}
//! POST {base}/v1/detokenize     {"tokens":[int]}  -> {"text":str}
//! ```
//!
//! Servers that return only the top-N entries leave the remaining mass
//! unassigned; it is spread uniformly over the ids that were not returned.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleError, OracleRequest, Truncation};
use crate::dist::{TokenDistribution, TokenId};

/// Backoff before each retry of a failed transport call.
const RETRY_BACKOFF_MS: [u64; 3] = [100, 200, 400];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopLogprobs {
    Top(usize),
    #[serde(with = "full_marker")]
    Full,
}

mod full_marker {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("full")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "full" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"full\""))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_parallel: usize,
    pub top_logprobs: TopLogprobs,
    /// Known vocabulary size; discovered from the first response otherwise.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub eos_token: Option<TokenId>,
    /// Server honors `attend_last` (attention masking with full positions).
    #[serde(default)]
    pub masking: bool,
    /// Model name sent to OpenAI-compatible servers.
    #[serde(default)]
    pub model: Option<String>,
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout_ms: 30_000,
            max_parallel: 4,
            top_logprobs: TopLogprobs::Full,
            vocab_size: None,
            eos_token: None,
            masking: false,
            model: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NextLogprobsRequest {
    pub tokens: Vec<TokenId>,
    pub top: TopLogprobs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attend_last: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogprobEntry {
    pub id: TokenId,
    pub logprob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NextLogprobsResponse {
    pub logprobs: Vec<LogprobEntry>,
    pub vocab_size: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TokenizeResponse {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DetokenizeRequest {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DetokenizeResponse {
    pub text: String,
}

/// Builds a full distribution from a possibly partial set of log-probs.
///
/// Returned ids keep `exp(logprob)`; the leftover mass `1 − Σ` is split
/// evenly over the ids that were not returned. If the returned mass already
/// covers everything (or every id was returned), the entries are
/// renormalized instead.
pub fn complete_distribution(
    entries: &[(TokenId, f64)],
    vocab_size: usize,
) -> Result<TokenDistribution, OracleError> {
    if vocab_size == 0 {
        return Err(OracleError::Protocol("vocab_size is zero".into()));
    }
    let mut probs = vec![f64::NAN; vocab_size];
    let mut mass = 0.0;
    for &(id, logprob) in entries {
        let slot = probs
            .get_mut(id as usize)
            .ok_or_else(|| OracleError::Protocol(format!("token id {id} >= vocab_size {vocab_size}")))?;
        if !slot.is_nan() {
            return Err(OracleError::Protocol(format!("token id {id} returned twice")));
        }
        if logprob.is_nan() || logprob > 1e-9 {
            return Err(OracleError::Protocol(format!("invalid logprob {logprob} for id {id}")));
        }
        let p = logprob.min(0.0).exp();
        *slot = p;
        mass += p;
    }
    let missing = probs.iter().filter(|p| p.is_nan()).count();
    let residual = 1.0 - mass;
    // anything below this is rounding in exp(ln p), not unreported mass
    let fill = if missing > 0 && residual > 1e-12 {
        residual / missing as f64
    } else {
        0.0
    };
    for p in probs.iter_mut().filter(|p| p.is_nan()) {
        *p = fill;
    }
    Ok(TokenDistribution::from_weights(probs)?)
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock();
            while *free == 0 {
                self.cv.wait(&mut free);
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock() += 1;
        self.cv.notify_one();
        out
    }
}

struct Transport {
    client: reqwest::blocking::Client,
    gate: Gate,
    base: String,
}

impl Transport {
    fn new(endpoint: &BackendEndpoint) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| OracleError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        Ok(Self {
            client,
            gate: Gate::new(endpoint.max_parallel),
            base: endpoint.base_url.trim_end_matches('/').to_string(),
        })
    }

    /// POST with retries on transport failures and 5xx responses. 4xx
    /// responses are request errors and are not retried.
    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, OracleError> {
        let url = format!("{}{}", self.base, path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = self.gate.run(|| self.client.post(&url).json(body).send());
            let retryable = match result {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<R>()
                        .map_err(|e| OracleError::Protocol(format!("{url}: {e}")));
                }
                Ok(resp) if resp.status().is_client_error() => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Err(OracleError::Request(format!("{url}: {status}: {text}")));
                }
                Ok(resp) => format!("{url}: server returned {}", resp.status()),
                Err(e) => format!("{url}: {e}"),
            };
            match RETRY_BACKOFF_MS.get(attempts as usize - 1) {
                Some(&ms) => {
                    tracing::warn!(attempt = attempts, "retrying after transport error: {retryable}");
                    thread::sleep(Duration::from_millis(ms));
                }
                None => {
                    return Err(OracleError::Transport {
                        message: retryable,
                        attempts,
                    })
                }
            }
        }
    }
}

/// Client for the native next-logprobs protocol.
pub struct HttpOracle {
    endpoint: BackendEndpoint,
    transport: Transport,
    vocab: OnceLock<usize>,
}

impl HttpOracle {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, OracleError> {
        let transport = Transport::new(&endpoint)?;
        let vocab = OnceLock::new();
        if let Some(v) = endpoint.vocab_size {
            let _ = vocab.set(v);
        }
        Ok(Self {
            endpoint,
            transport,
            vocab,
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn fetch(&self, tokens: &[TokenId], attend_last: Option<usize>) -> Result<TokenDistribution, OracleError> {
        if tokens.is_empty() {
            return Err(OracleError::Request("empty token prefix".into()));
        }
        if let Some(&v) = self.vocab.get() {
            if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
                return Err(OracleError::Request(format!("token {bad} outside vocabulary of size {v}")));
            }
        }
        let resp: NextLogprobsResponse = self.transport.post(
            "/v1/next_logprobs",
            &NextLogprobsRequest {
                tokens: tokens.to_vec(),
                top: self.endpoint.top_logprobs,
                attend_last,
            },
        )?;
        let _ = self.vocab.set(resp.vocab_size);
        let entries: Vec<(TokenId, f64)> = resp.logprobs.iter().map(|e| (e.id, e.logprob)).collect();
        complete_distribution(&entries, resp.vocab_size)
    }
}

impl Oracle for HttpOracle {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        if let Some(&v) = self.vocab.get() {
            return Ok(v);
        }
        self.fetch(&[0], None)?;
        self.vocab
            .get()
            .copied()
            .ok_or_else(|| OracleError::Protocol("vocab_size not reported".into()))
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        self.fetch(&req.tokens, None)
    }

    fn truncation(&self) -> Truncation {
        if self.endpoint.masking {
            Truncation::Masked
        } else {
            Truncation::Literal
        }
    }

    fn masked_distribution(&self, full: &[TokenId], window: usize) -> Result<TokenDistribution, OracleError> {
        if self.endpoint.masking {
            self.fetch(full, Some(window))
        } else {
            self.fetch(&full[full.len().saturating_sub(window)..], None)
        }
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.endpoint.eos_token
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, OracleError> {
        let resp: TokenizeResponse = self.transport.post(
            "/v1/tokenize",
            &TokenizeRequest {
                text: text.to_string(),
            },
        )?;
        Ok(resp.tokens)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, OracleError> {
        let resp: DetokenizeResponse = self.transport.post(
            "/v1/detokenize",
            &DetokenizeRequest {
                tokens: tokens.to_vec(),
            },
        )?;
        Ok(resp.text)
    }
}

/// Adapter for OpenAI-compatible `/v1/completions` servers.
///
/// Sends the prompt as token ids with `echo` and `logprobs` set and one
/// generated token, then reads the top log-probs of the generated position.
/// Token keys are expected as `token_id:N` (vLLM's
/// `return_tokens_as_token_ids`) or as bare integers. The vocabulary size must
/// be configured since these servers do not report it.
pub struct OpenAiCompletionOracle {
    endpoint: BackendEndpoint,
    transport: Transport,
    vocab_size: usize,
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a [TokenId],
    max_tokens: u32,
    logprobs: usize,
    echo: bool,
    temperature: f64,
    return_tokens_as_token_ids: bool,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionLogprobs {
    top_logprobs: Vec<Option<std::collections::BTreeMap<String, f64>>>,
}

fn parse_token_key(key: &str) -> Option<TokenId> {
    key.strip_prefix("token_id:").unwrap_or(key).trim().parse().ok()
}

impl OpenAiCompletionOracle {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, OracleError> {
        let vocab_size = endpoint.vocab_size.ok_or_else(|| {
            OracleError::Request("OpenAI-compatible backends need an explicit vocab_size".into())
        })?;
        let transport = Transport::new(&endpoint)?;
        Ok(Self {
            endpoint,
            transport,
            vocab_size,
        })
    }
}

impl Oracle for OpenAiCompletionOracle {
    fn vocab_size(&self) -> Result<usize, OracleError> {
        Ok(self.vocab_size)
    }

    fn next_token_distribution(&self, req: &OracleRequest) -> Result<TokenDistribution, OracleError> {
        req.validate(self.vocab_size)?;
        let top = match self.endpoint.top_logprobs {
            TopLogprobs::Top(n) => n,
            TopLogprobs::Full => 20,
        };
        let resp: CompletionResponse = self.transport.post(
            "/v1/completions",
            &CompletionRequest {
                model: self.endpoint.model.as_deref().unwrap_or("default"),
                prompt: &req.tokens,
                max_tokens: 1,
                logprobs: top,
                echo: true,
                temperature: 0.0,
                return_tokens_as_token_ids: true,
            },
        )?;
        let last = resp
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .and_then(|l| l.top_logprobs.last().cloned().flatten())
            .ok_or_else(|| OracleError::Protocol("response carries no top_logprobs".into()))?;
        let mut entries = Vec::with_capacity(last.len());
        for (key, lp) in last {
            let id = parse_token_key(&key)
                .ok_or_else(|| OracleError::Protocol(format!("cannot map token key `{key}` to an id")))?;
            entries.push((id, lp));
        }
        complete_distribution(&entries, self.vocab_size)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.endpoint.eos_token
    }
}
