//! Read-only HTTP/JSON service over a refiner store.
//!
//! Every response body is an envelope `{data, total_count?, error?}`; the
//! `data` payloads come from [`views`], which the CLI shares.

pub mod views;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use refiner_core::config::RefinerConfig;
use refiner_core::query::MAX_PAGE_LIMIT;
use refiner_core::store::{Snapshot, Store};
use tower::limit::ConcurrencyLimitLayer;
use tower_http::cors::{AllowOrigin, CorsLayer};

use views::{
    BlocksParams, Envelope, ErrorCode, HistoryParams, PageParams, QueryBody, SyncProbe, TxParams, ViewError,
    ViewResult,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiConfig {
    pub listen_address: String,
    pub store_path: PathBuf,
    pub cors_allowed_origins: Vec<String>,
    pub page_limit_max: u64,
    pub max_concurrent_requests: usize,
}

impl ApiConfig {
    pub fn new(store_path: impl Into<PathBuf>) -> Self {
        let api = RefinerConfig::default().api;
        ApiConfig {
            listen_address: api.listen_address,
            store_path: store_path.into(),
            cors_allowed_origins: api.cors_allowed_origins,
            page_limit_max: api.page_limit_max,
            max_concurrent_requests: api.max_concurrent_requests,
        }
    }

    pub fn from_config(cfg: &RefinerConfig, store_path: impl Into<PathBuf>) -> Self {
        ApiConfig {
            listen_address: cfg.api.listen_address.clone(),
            store_path: store_path.into(),
            cors_allowed_origins: cfg.api.cors_allowed_origins.clone(),
            page_limit_max: cfg.api.page_limit_max,
            max_concurrent_requests: cfg.api.max_concurrent_requests,
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        if !(1..=MAX_PAGE_LIMIT).contains(&self.page_limit_max) {
            return Err(ApiError::InvalidConfig(format!(
                "page_limit_max must be between 1 and {MAX_PAGE_LIMIT}"
            )));
        }
        if self.max_concurrent_requests == 0 {
            return Err(ApiError::InvalidConfig("max_concurrent_requests must be positive".into()));
        }
        for origin in &self.cors_allowed_origins {
            HeaderValue::from_str(origin)
                .map_err(|_| ApiError::InvalidConfig(format!("bad CORS origin {origin:?}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("invalid api configuration: {0}")]
    InvalidConfig(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("cannot bind {address}: {source}")]
    BindFailure {
        address: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}

#[derive(Clone)]
struct AppState {
    store_path: Arc<PathBuf>,
    page_limit_max: u64,
    sync: Option<SyncProbe>,
}

impl AppState {
    /// Runs `view` against a fresh snapshot on the blocking pool.
    async fn view<F>(&self, view: F) -> Response
    where
        F: FnOnce(&Snapshot<'_>, u64) -> ViewResult + Send + 'static,
    {
        let path = Arc::clone(&self.store_path);
        let limit_max = self.page_limit_max;
        let result = tokio::task::spawn_blocking(move || {
            let store = Store::open_read_only(path.as_path())
                .map_err(|e| ViewError::new(ErrorCode::Internal, format!("store unavailable: {e}")))?;
            let snap = store.snapshot()?;
            view(&snap, limit_max)
        })
        .await
        .unwrap_or_else(|e| Err(ViewError::new(ErrorCode::Internal, format!("request task failed: {e}"))));
        respond(result)
    }
}

fn respond(result: ViewResult) -> Response {
    let status = match &result {
        Ok(_) => StatusCode::OK,
        Err(e) => StatusCode::from_u16(e.code.http_status()).expect("known status"),
    };
    (status, Json(Envelope::from(result))).into_response()
}

fn reject(message: impl ToString) -> Response {
    respond(Err(ViewError::invalid_request(message.to_string())))
}

/// The service's routes over the store at `config.store_path`.
pub fn router(config: &ApiConfig, sync: Option<SyncProbe>) -> Router {
    let state = AppState {
        store_path: Arc::new(config.store_path.clone()),
        page_limit_max: config.page_limit_max,
        sync,
    };
    let mut app = Router::new()
        .route("/blocks", get(list_blocks))
        .route("/blocks/{number}", get(get_block))
        .route("/transactions", get(list_transactions))
        .route("/transactions/{tx_id}", get(get_transaction))
        .route("/states/{key}", get(get_state))
        .route("/states/{key}/history", get(get_history))
        .route("/schemas", get(list_schemas))
        .route("/schemas/{id}", get(get_schema))
        .route("/schemas/{id}/states", get(list_schema_states))
        .route("/query", post(run_query))
        .route("/stats", get(get_stats))
        .route("/sync/status", get(get_sync_status))
        .fallback(|| async { respond(Err(ViewError::new(ErrorCode::NotFound, "no such endpoint"))) })
        .with_state(state)
        .layer(ConcurrencyLimitLayer::new(config.max_concurrent_requests.max(1)));
    if !config.cors_allowed_origins.is_empty() {
        let origins: Vec<HeaderValue> = config
            .cors_allowed_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    app
}

/// Serves until `shutdown` resolves. Fails early if the store cannot be
/// read or the address cannot be bound.
pub async fn serve(
    config: ApiConfig,
    sync: Option<SyncProbe>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ApiError> {
    config.validate()?;
    Store::open_read_only(&config.store_path)
        .and_then(|s| s.recorded_height())
        .map_err(|e| ApiError::StoreUnavailable(e.to_string()))?;
    let listener = bind(&config.listen_address).await?;
    if let Ok(addr) = listener.local_addr() {
        log::info!("serving {} on http://{addr}", config.store_path.display());
    }
    axum::serve(listener, router(&config, sync))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ApiError::Serve)
}

pub async fn bind(address: &str) -> Result<tokio::net::TcpListener, ApiError> {
    let fail = |source| ApiError::BindFailure {
        address: address.to_string(),
        source,
    };
    let addr: SocketAddr = match address.parse() {
        Ok(a) => a,
        Err(_) => tokio::net::lookup_host(address)
            .await
            .map_err(fail)?
            .next()
            .ok_or_else(|| fail(std::io::Error::new(std::io::ErrorKind::NotFound, "no address")))?,
    };
    tokio::net::TcpListener::bind(addr).await.map_err(fail)
}

async fn list_blocks(State(s): State<AppState>, q: Result<Query<BlocksParams>, QueryRejection>) -> Response {
    match q {
        Ok(Query(p)) => s.view(move |snap, max| views::blocks(snap, &p, max)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn get_block(State(s): State<AppState>, n: Result<Path<u64>, PathRejection>) -> Response {
    match n {
        Ok(Path(n)) => s.view(move |snap, _| views::block(snap, n)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn list_transactions(State(s): State<AppState>, q: Result<Query<TxParams>, QueryRejection>) -> Response {
    match q {
        Ok(Query(p)) => s.view(move |snap, max| views::transactions(snap, &p, max)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn get_transaction(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    s.view(move |snap, _| views::transaction(snap, &id)).await
}

async fn get_state(State(s): State<AppState>, Path(key): Path<String>) -> Response {
    s.view(move |snap, _| views::state(snap, &key)).await
}

async fn get_history(
    State(s): State<AppState>,
    Path(key): Path<String>,
    q: Result<Query<HistoryParams>, QueryRejection>,
) -> Response {
    match q {
        Ok(Query(p)) => s.view(move |snap, _| views::history(snap, &key, &p)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn list_schemas(State(s): State<AppState>) -> Response {
    s.view(|snap, _| views::schemas(snap)).await
}

async fn get_schema(State(s): State<AppState>, id: Result<Path<u64>, PathRejection>) -> Response {
    match id {
        Ok(Path(id)) => s.view(move |snap, _| views::schema(snap, id)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn list_schema_states(
    State(s): State<AppState>,
    id: Result<Path<u64>, PathRejection>,
    q: Result<Query<PageParams>, QueryRejection>,
) -> Response {
    match (id, q) {
        (Ok(Path(id)), Ok(Query(p))) => s.view(move |snap, max| views::schema_states(snap, id, &p, max)).await,
        (Err(e), _) => reject(e.body_text()),
        (_, Err(e)) => reject(e.body_text()),
    }
}

async fn run_query(State(s): State<AppState>, body: Result<Json<QueryBody>, JsonRejection>) -> Response {
    match body {
        Ok(Json(b)) => s.view(move |snap, max| views::rich_query(snap, &b, max)).await,
        Err(e) => reject(e.body_text()),
    }
}

async fn get_stats(State(s): State<AppState>) -> Response {
    s.view(|snap, _| views::stats(snap)).await
}

async fn get_sync_status(State(s): State<AppState>) -> Response {
    let probe = s.sync.clone();
    s.view(move |snap, _| views::sync_status(snap, probe.as_ref())).await
}
