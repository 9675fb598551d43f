//! HTTP + WebSocket session API over the occupancy engine.
//!
//! Endpoints (JSON, schema `"v": 1`):
//! `GET /health`, `POST /sessions`, `GET /sessions/{id}`,
//! `POST /sessions/{id}/step`, `POST /sessions/{id}/branch`,
//! `GET /sessions/{id}/frames/{step}[?full=1]`, `GET /sessions/{id}/stream` (WebSocket).

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use occplan_core::synthworld::Scenario;
use occplan_core::world::WorldKind;
use occplan_core::EngineConfig;

pub use session::{ApiError, ApiResult, FlowSummary, FramePayload, Session, SessionOrigin, StepAction, SCHEMA_VERSION};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({"v": SCHEMA_VERSION, "code": self.code, "detail": self.detail}))).into_response()
    }
}

type SessionRef = Arc<Mutex<Session>>;

pub struct AppState {
    config: EngineConfig,
    scenario_dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, SessionRef>>,
    streams: Mutex<HashMap<String, broadcast::Sender<String>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: EngineConfig, scenario_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            config,
            scenario_dir,
            sessions: Mutex::new(HashMap::new()),
            streams: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn fresh_id(&self) -> String {
        format!("s{:04}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn session(&self, id: &str) -> ApiResult<SessionRef> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    fn insert(&self, s: Session) -> SessionRef {
        let id = s.id.clone();
        let r = Arc::new(Mutex::new(s));
        self.sessions.lock().expect("session map poisoned").insert(id.clone(), r.clone());
        self.streams
            .lock()
            .expect("stream map poisoned")
            .insert(id, broadcast::channel(64).0);
        r
    }

    fn publish(&self, id: &str, frame: &FramePayload) {
        if let Some(tx) = self.streams.lock().expect("stream map poisoned").get(id) {
            let msg = json!({"v": SCHEMA_VERSION, "type": "frame", "id": id, "frame": frame});
            // no subscribers is fine
            let _ = tx.send(msg.to_string());
        }
    }

    fn subscribe(&self, id: &str) -> ApiResult<broadcast::Receiver<String>> {
        self.streams
            .lock()
            .expect("stream map poisoned")
            .get(id)
            .map(|tx| tx.subscribe())
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/branch", post(branch_session))
        .route("/sessions/{id}/frames/{step}", get(get_frame))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn parse_body(body: &Bytes) -> ApiResult<Value> {
    let v: Value = if body.is_empty() {
        json!({})
    } else {
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?
    };
    if !v.is_object() {
        return Err(ApiError::bad_request("body must be a JSON object"));
    }
    match v.get("v") {
        None => {}
        Some(x) if x.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(x) => return Err(ApiError::bad_request(format!("unsupported schema version {x}"))),
    }
    Ok(v)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health() -> Json<Value> {
    Json(json!({"v": SCHEMA_VERSION, "status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body = parse_body(&body)?;
    let scenario = match body.get("scenario") {
        Some(Value::String(name)) => session::resolve_scenario(st.scenario_dir.as_deref(), name)?,
        Some(obj @ Value::Object(_)) => {
            let s: Scenario =
                serde_json::from_value(obj.clone()).map_err(|e| ApiError::bad_request(format!("scenario: {e}")))?;
            s.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
            s
        }
        _ => return Err(ApiError::bad_request("field \"scenario\" must be a name or an object")),
    };
    let world = match body.get("world") {
        None => WorldKind::Oracle,
        Some(Value::String(w)) => w.parse().map_err(ApiError::bad_request)?,
        Some(other) => return Err(ApiError::bad_request(format!("world must be a string, got {other}"))),
    };
    let seed = match body.get("seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ApiError::bad_request("seed must be a non-negative integer"))?,
    };
    let origin = SessionOrigin { scenario, world, seed };
    let id = st.fresh_id();
    let st2 = st.clone();
    let (id, frame) = blocking(move || {
        let s = Session::create(id.clone(), origin, &st2.config)?;
        let frame = s.frame(0, false)?;
        st2.insert(s);
        Ok((id, frame))
    })
    .await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"v": SCHEMA_VERSION, "id": id, "frame": frame})),
    ))
}

async fn session_info(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(json!({
        "v": SCHEMA_VERSION,
        "id": s.id,
        "world": s.origin.world,
        "seed": s.origin.seed,
        "current_step": s.current_step(),
        "parent": s.parent.as_ref().map(|(p, at)| json!({"id": p, "step": at})),
        "children": s.children,
        "actions": s.actions(),
    })))
}

async fn step_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let body = parse_body(&body)?;
    let action = StepAction::from_request(&body)?;
    let s = st.session(&id)?;
    let frame = blocking(move || s.lock().expect("session poisoned").step(action)).await?;
    st.publish(&id, &frame);
    Ok(Json(json!({"v": SCHEMA_VERSION, "id": id, "frame": frame})))
}

async fn branch_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body = parse_body(&body)?;
    let parent = st.session(&id)?;
    let at = match body.get("at") {
        None => parent.lock().expect("session poisoned").current_step(),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ApiError::bad_step("\"at\" must be a non-negative integer"))? as usize,
    };
    let child_id = st.fresh_id();
    let st2 = st.clone();
    let frame = blocking(move || {
        let child = {
            let p = parent.lock().expect("session poisoned");
            p.branch(child_id.clone(), at)?
        };
        let frame = child.frame(at, false)?;
        st2.insert(child);
        parent.lock().expect("session poisoned").children.push(child_id.clone());
        Ok((child_id, frame))
    })
    .await?;
    let (child_id, frame) = frame;
    Ok((
        StatusCode::CREATED,
        Json(json!({"v": SCHEMA_VERSION, "id": child_id, "parent": id, "at": at, "frame": frame})),
    ))
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    #[serde(default)]
    full: Option<String>,
}

async fn get_frame(
    State(st): State<Arc<AppState>>,
    Path((id, step)): Path<(String, usize)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Json<FramePayload>> {
    let full = matches!(q.full.as_deref(), Some("1" | "true"));
    let s = st.session(&id)?;
    let f = s.lock().expect("session poisoned").frame(step, full)?;
    Ok(Json(f))
}

async fn stream(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let rx = st.subscribe(&id)?;
    Ok(ws.on_upgrade(move |socket| pump(socket, rx)))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<String>) {
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let note = json!({"v": SCHEMA_VERSION, "type": "lagged", "skipped": n});
                    if socket.send(Message::Text(note.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                _ => {}
            },
        }
    }
}
