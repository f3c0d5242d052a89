//! HTTP enrolment and verification service.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use keyformer_core::data::{features_from_timed, Session, TimedKey};
use keyformer_core::model::{forward_embed, Embedding, ModelWeights};
use keyformer_core::store::{TemplateStore, VerifyDecision};
use keyformer_core::train::Checkpoint;
use keyformer_core::{Error, Result};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;

/// Fewer events leave no inter-key features to speak of.
pub const MIN_EVENTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPayload {
    pub key_code: u8,
    pub press_ms: f64,
    pub release_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPayload {
    pub user_id: String,
    pub events: Vec<EventPayload>,
}

impl SessionPayload {
    /// Request body carrying the events of a recorded session.
    pub fn from_session(user_id: impl Into<String>, session: &Session) -> Self {
        SessionPayload {
            user_id: user_id.into(),
            events: session
                .events
                .iter()
                .map(|e| EventPayload {
                    key_code: e.key_code,
                    press_ms: e.press_time as f64,
                    release_ms: e.release_time as f64,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: String,
    pub sessions_enrolled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model_checksum: String,
    pub uptime_s: f64,
}

pub struct AppState {
    weights: ModelWeights<f32>,
    checksum: String,
    default_threshold: Option<f64>,
    store: RwLock<TemplateStore>,
    started: Instant,
}

impl AppState {
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let model = cfg
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("service needs a model checkpoint path".into()))?;
        let cp = Checkpoint::load(model)?;
        let checksum = cp.digest()?;
        let store = TemplateStore::open(&cfg.store)?;
        Ok(AppState {
            default_threshold: cfg.threshold.or(cp.global_threshold),
            weights: cp.weights,
            checksum,
            store: RwLock::new(store),
            started: Instant::now(),
        })
    }

    pub fn model_checksum(&self) -> &str {
        &self.checksum
    }

    pub fn default_threshold(&self) -> Option<f64> {
        self.default_threshold
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.status)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownUser(_) => StatusCode::NOT_FOUND,
            Error::Contract(_) | Error::Dimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Checks a session body and puts its events in press order.
pub fn validate(payload: &SessionPayload) -> Result<Vec<TimedKey>, ApiError> {
    if payload.user_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "user_id: must not be empty"));
    }
    for (i, e) in payload.events.iter().enumerate() {
        if !e.press_ms.is_finite() || !e.release_ms.is_finite() {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("events[{i}]: times must be finite"),
            ));
        }
        if e.release_ms < e.press_ms {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("events[{i}].release_ms: {} is before press_ms {}", e.release_ms, e.press_ms),
            ));
        }
    }
    if payload.events.len() < MIN_EVENTS {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "events: {} given, at least {MIN_EVENTS} needed",
                payload.events.len()
            ),
        ));
    }
    let mut keys: Vec<TimedKey> = payload
        .events
        .iter()
        .map(|e| TimedKey {
            key_code: e.key_code,
            press_ms: e.press_ms,
            release_ms: e.release_ms,
        })
        .collect();
    keys.sort_by(|a, b| a.press_ms.total_cmp(&b.press_ms));
    Ok(keys)
}

/// Inference-mode embedding of one validated session.
pub fn embed_keys(weights: &ModelWeights<f32>, keys: &[TimedKey], user_id: &str) -> Result<Embedding> {
    let fs = features_from_timed(keys, weights.config().seq_len, user_id, "request")?;
    forward_embed(weights, &fs, None)
}

async fn embed_events(state: &Arc<AppState>, user_id: &str, keys: Vec<TimedKey>) -> Result<Embedding, ApiError> {
    let state = Arc::clone(state);
    let user = user_id.to_string();
    tokio::task::spawn_blocking(move || embed_keys(&state.weights, &keys, &user))
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(ApiError::from)
}

async fn enroll(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SessionPayload>, JsonRejection>,
) -> Result<Json<UserSummary>, ApiError> {
    let Json(payload) = body?;
    let keys = validate(&payload)?;
    let embedding = embed_events(&state, &payload.user_id, keys).await?;
    let count = state
        .store
        .write()
        .expect("store lock")
        .enroll(&payload.user_id, embedding, now_ms())?;
    tracing::info!(user = %payload.user_id, sessions = count, "enrolled");
    Ok(Json(UserSummary {
        user_id: payload.user_id,
        sessions_enrolled: count,
    }))
}

async fn verify(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SessionPayload>, JsonRejection>,
) -> Result<Json<VerifyDecision>, ApiError> {
    let Json(payload) = body?;
    let keys = validate(&payload)?;
    if state.store.read().expect("store lock").get(&payload.user_id).is_none() {
        return Err(Error::UnknownUser(payload.user_id).into());
    }
    let probe = embed_events(&state, &payload.user_id, keys).await?;
    let decision = state.store.read().expect("store lock").verify(
        &payload.user_id,
        &probe,
        state.default_threshold,
        &state.checksum,
    )?;
    Ok(Json(decision))
}

async fn users(State(state): State<Arc<AppState>>) -> Json<Vec<UserSummary>> {
    let list = state
        .store
        .read()
        .expect("store lock")
        .users()
        .into_iter()
        .map(|(user_id, sessions_enrolled)| UserSummary {
            user_id,
            sessions_enrolled,
        })
        .collect();
    Json(list)
}

async fn delete_user(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.store.write().expect("store lock").delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        model_checksum: state.checksum.clone(),
        uptime_s: state.started.elapsed().as_secs_f64(),
    })
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Result<Router> {
    let mut app = Router::new()
        .route("/api/v1/enroll", post(enroll))
        .route("/api/v1/verify", post(verify))
        .route("/api/v1/users", get(users))
        .route("/api/v1/users/{id}", delete(delete_user))
        .route("/api/v1/health", get(health))
        .with_state(state);
    if !cors_origins.is_empty() {
        let origins = cors_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| Error::Config(format!("bad CORS origin {o:?}"))))
            .collect::<Result<Vec<_>>>()?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST, Method::DELETE])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

/// A service bound to a socket and running on the current runtime.
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: oneshot::Sender<()>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    pub async fn stop(self) -> Result<()> {
        let _ = self.shutdown.send(());
        self.task
            .await
            .map_err(|e| Error::Contract(format!("service task failed: {e}")))?
            .map_err(|e| Error::Io {
                path: "<socket>".into(),
                source: e,
            })
    }
}

pub async fn start(cfg: &ServiceConfig) -> Result<RunningService> {
    let state = Arc::new(AppState::load(cfg)?);
    let app = router(state, &cfg.cors_origins)?;
    let listener = TcpListener::bind(&cfg.bind).await.map_err(|e| Error::Io {
        path: cfg.bind.clone().into(),
        source: e,
    })?;
    let addr = listener.local_addr().map_err(|e| Error::Io {
        path: cfg.bind.clone().into(),
        source: e,
    })?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "service listening");
    Ok(RunningService {
        addr,
        shutdown: tx,
        task,
    })
}
