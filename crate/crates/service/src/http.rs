//! Axum router and server entry points.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coldselect::clustering::ClusterDump;
use coldselect::selection::SessionExport;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::annotator::{Annotator, ServiceError, WireState};

pub const DEFAULT_PORT: u16 = 8642;

/// Read side of the session, replaced wholesale after every mutation.
struct Snapshot {
    version: u64,
    state: WireState,
    export: SessionExport,
    clusters: Arc<ClusterDump>,
}

struct Inner {
    annotator: Mutex<Option<Annotator>>,
    snapshot: ArcSwapOption<Snapshot>,
}

/// Shared handle passed to every handler.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl Default for AppState {
    fn default() -> Self {
        Self::new()
    }
}

impl AppState {
    /// A service with no session yet; every endpoint answers 503.
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Inner {
                annotator: Mutex::new(None),
                snapshot: ArcSwapOption::empty(),
            }),
        }
    }

    pub fn with_annotator(annotator: Annotator) -> Self {
        let state = Self::new();
        state.install(annotator);
        state
    }

    pub fn install(&self, annotator: Annotator) {
        let mut slot = self.inner.annotator.lock().expect("annotator lock");
        let clusters = Arc::new(
            annotator
                .session()
                .clustering()
                .to_dump(annotator.session().space()),
        );
        self.inner.snapshot.store(Some(Arc::new(snapshot_of(&annotator, clusters))));
        *slot = Some(annotator);
    }

    fn snapshot(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.inner.snapshot.load_full().ok_or(ApiError {
            version: 0,
            error: ServiceError::NotReady,
        })
    }

    /// Runs one mutation under the write lock and publishes a new snapshot.
    fn mutate<T>(&self, f: impl FnOnce(&mut Annotator) -> Result<T, ServiceError>) -> Result<(u64, T), ApiError> {
        let mut slot = self.inner.annotator.lock().unwrap_or_else(|p| p.into_inner());
        let annotator = slot.as_mut().ok_or(ApiError {
            version: 0,
            error: ServiceError::NotReady,
        })?;
        let out = f(annotator).map_err(|error| ApiError {
            version: annotator.version(),
            error,
        })?;
        let clusters = self.snapshot()?.clusters.clone();
        let snap = snapshot_of(annotator, clusters);
        let version = snap.version;
        self.inner.snapshot.store(Some(Arc::new(snap)));
        Ok((version, out))
    }
}

fn snapshot_of(annotator: &Annotator, clusters: Arc<ClusterDump>) -> Snapshot {
    Snapshot {
        version: annotator.version(),
        state: annotator.wire_state(),
        export: annotator.export(),
        clusters,
    }
}

/// Every body carries `state_version` next to its own fields.
#[derive(Serialize)]
struct Versioned<T> {
    state_version: u64,
    #[serde(flatten)]
    body: T,
}

fn versioned<T: Serialize>(version: u64, body: T) -> Response {
    Json(Versioned {
        state_version: version,
        body,
    })
    .into_response()
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

struct ApiError {
    version: u64,
    error: ServiceError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.error {
            ServiceError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::PendingExists(_) => StatusCode::CONFLICT,
            ServiceError::BudgetExhausted | ServiceError::NothingLeft => StatusCode::GONE,
            ServiceError::NotPending(_) => StatusCode::NOT_FOUND,
            ServiceError::UnknownClass(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Log { .. } | ServiceError::Replay { .. } | ServiceError::Selection(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = ErrorBody {
            error: self.error.code(),
            message: self.error.to_string(),
        };
        (status, versioned(self.version, body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRequest {
    pub instance_id: String,
    pub class: String,
}

async fn get_state(State(app): State<AppState>) -> Result<Response, ApiError> {
    let s = app.snapshot()?;
    Ok(versioned(s.version, &s.state))
}

async fn get_clusters(State(app): State<AppState>) -> Result<Response, ApiError> {
    let s = app.snapshot()?;
    Ok(versioned(s.version, s.clusters.as_ref()))
}

async fn get_export(State(app): State<AppState>) -> Result<Response, ApiError> {
    let s = app.snapshot()?;
    Ok(versioned(s.version, &s.export))
}

async fn post_next(State(app): State<AppState>) -> Result<Response, ApiError> {
    let (version, item) = app.mutate(|a| a.next_item())?;
    Ok(versioned(version, item))
}

async fn post_label(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let request: LabelRequest = serde_json::from_slice(&body).map_err(|e| ApiError {
        version: app.snapshot().map(|s| s.version).unwrap_or(0),
        error: ServiceError::BadRequest(e.to_string()),
    })?;
    let (version, state) = app.mutate(|a| a.label(&request.instance_id, &request.class))?;
    Ok(versioned(version, state))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/next", post(post_next))
        .route("/api/label", post(post_label))
        .route("/api/clusters", get(get_clusters))
        .route("/api/export", get(get_export))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub async fn bind(port: u16) -> std::io::Result<TcpListener> {
    TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await
}
