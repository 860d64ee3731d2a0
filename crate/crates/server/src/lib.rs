//! Serves an [`Oracle`] over the next-logprobs HTTP protocol that
//! [`ctxlens::oracle::HttpOracle`] speaks. Useful for exercising the HTTP
//! client end to end and for sharing one mock between processes.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use ctxlens::decoding::ranked_tokens;
use ctxlens::oracle::http::{
    DetokenizeRequest, DetokenizeResponse, LogprobEntry, NextLogprobsRequest, NextLogprobsResponse,
    TokenizeRequest, TokenizeResponse,
};
use ctxlens::oracle::{Oracle, OracleError, OracleRequest, TopLogprobs};
use ctxlens::TokenDistribution;
use tokio::net::TcpListener;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Answer the first `n` requests with 503, to exercise client retries.
    pub fail_first: usize,
}

struct AppState {
    oracle: Arc<dyn Oracle>,
    failures_left: AtomicUsize,
    requests: AtomicUsize,
}

/// Shared handle to the running server's counters.
#[derive(Clone)]
pub struct ServerStats(Arc<AppState>);

impl ServerStats {
    /// Requests received so far, including injected failures.
    pub fn requests(&self) -> usize {
        self.0.requests.load(Ordering::SeqCst)
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<OracleError> for ApiError {
    fn from(e: OracleError) -> Self {
        let status = match e {
            OracleError::Request(_) | OracleError::Dist(_) => StatusCode::BAD_REQUEST,
            OracleError::Unsupported(_) => StatusCode::NOT_IMPLEMENTED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(oracle: Arc<dyn Oracle>, options: ServerOptions) -> (Router, ServerStats) {
    let state = Arc::new(AppState {
        oracle,
        failures_left: AtomicUsize::new(options.fail_first),
        requests: AtomicUsize::new(0),
    });
    let app = Router::new()
        .route("/v1/next_logprobs", post(next_logprobs))
        .route("/v1/tokenize", post(tokenize))
        .route("/v1/detokenize", post(detokenize))
        .with_state(state.clone());
    (app, ServerStats(state))
}

fn admit(state: &AppState) -> Result<(), ApiError> {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let injected = state
        .failures_left
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if injected {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "injected failure".into()));
    }
    Ok(())
}

/// Runs oracle code off the async executor; backends may block.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, OracleError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn to_entries(dist: &TokenDistribution, top: TopLogprobs) -> Vec<LogprobEntry> {
    let ranked = ranked_tokens(dist.probs());
    let n = match top {
        TopLogprobs::Top(n) => n,
        TopLogprobs::Full => ranked.len(),
    };
    ranked
        .into_iter()
        .take(n)
        .map(|id| (id, dist.prob(id)))
        .filter(|&(_, p)| p > 0.0)
        .map(|(id, p)| LogprobEntry { id, logprob: p.ln() })
        .collect()
}

async fn next_logprobs(
    State(state): State<Arc<AppState>>,
    Json(req): Json<NextLogprobsRequest>,
) -> Result<Json<NextLogprobsResponse>, ApiError> {
    admit(&state)?;
    let oracle = state.oracle.clone();
    let (dist, vocab_size) = blocking(move || {
        let vocab = oracle.vocab_size()?;
        let request = OracleRequest::full(&req.tokens);
        request.validate(vocab)?;
        let dist = match req.attend_last {
            Some(0) => return Err(OracleError::Request("attend_last must be >= 1".into())),
            Some(w) if w < req.tokens.len() => oracle.masked_distribution(&req.tokens, w)?,
            _ => oracle.next_token_distribution(&request)?,
        };
        Ok((to_entries(&dist, req.top), vocab))
    })
    .await?;
    Ok(Json(NextLogprobsResponse {
        logprobs: dist,
        vocab_size,
    }))
}

async fn tokenize(
    State(state): State<Arc<AppState>>,
    Json(req): Json<TokenizeRequest>,
) -> Result<Json<TokenizeResponse>, ApiError> {
    admit(&state)?;
    let oracle = state.oracle.clone();
    let tokens = blocking(move || oracle.tokenize(&req.text)).await?;
    Ok(Json(TokenizeResponse { tokens }))
}

async fn detokenize(
    State(state): State<Arc<AppState>>,
    Json(req): Json<DetokenizeRequest>,
) -> Result<Json<DetokenizeResponse>, ApiError> {
    admit(&state)?;
    let oracle = state.oracle.clone();
    let text = blocking(move || oracle.detokenize(&req.tokens)).await?;
    Ok(Json(DetokenizeResponse { text }))
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: TcpListener, oracle: Arc<dyn Oracle>, options: ServerOptions) -> std::io::Result<()> {
    let (app, _) = router(oracle, options);
    tracing::info!(addr = %listener.local_addr()?, "serving oracle");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr` and serves on a fresh runtime until Ctrl-C.
pub fn serve_blocking(addr: &str, oracle: Arc<dyn Oracle>, options: ServerOptions) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = TcpListener::bind(addr).await?;
        serve(listener, oracle, options).await
    })
}

/// A server running on its own runtime thread, for use from blocking code.
/// It stops when the handle is dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    stats: ServerStats,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds to an ephemeral localhost port.
    pub fn start(oracle: Arc<dyn Oracle>, options: ServerOptions) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        let (app, stats) = router(oracle, options);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            stats,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
