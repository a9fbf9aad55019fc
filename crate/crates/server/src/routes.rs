//! HTTP and WebSocket routes for the cloud, signaling and orchestrator
//! services.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::SplitStream;
use futures_util::{SinkExt, StreamExt};
use rlabs_core::clock::{iso8601, parse_iso8601, Clock};
use rlabs_core::cloud::{coerce, CloudApi, CloudError, PinStore};
use rlabs_core::image::Frame;
use rlabs_core::orchestrator::{ApiError, EntryStatus, Orchestrator, Outbound};
use rlabs_core::protocol::ChannelMessage;
use rlabs_core::signaling::{Broker, InboxItem, MediaApi, SignalError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;

/// How often a `/peer/stream` socket looks for delivered frames.
pub const STREAM_POLL: Duration = Duration::from_millis(5);
/// How long `enter` holds the request open while the node is probed.
const ENTER_GRACE_MS: u64 = 2_000;
const AUTH_WAIT: Duration = Duration::from_secs(10);

#[derive(Debug)]
pub struct HttpError {
    status: StatusCode,
    body: Value,
}

impl HttpError {
    fn new(status: u16, kind: &str, message: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            body: json!({ "error": kind, "message": message.to_string() }),
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type Reply = Result<Json<Value>, HttpError>;

fn param<'a>(q: &'a HashMap<String, String>, name: &str) -> Result<&'a str, HttpError> {
    q.get(name)
        .map(String::as_str)
        .ok_or_else(|| HttpError::new(400, "bad_request", format!("missing query parameter {name}")))
}

fn ok() -> Reply {
    Ok(Json(json!({ "ok": true })))
}

// ---- cloud ----

fn cloud_error(e: CloudError) -> HttpError {
    match &e {
        CloudError::UnknownToken => HttpError::new(404, "unknown_token", &e),
        CloudError::BadPin(_) => HttpError::new(400, "bad_pin", &e),
        CloudError::Transport(_) => HttpError::new(502, "transport", &e),
    }
}

pub fn cloud_router(store: Arc<PinStore>) -> Router {
    Router::new()
        .route("/cloud/get", get(cloud_get))
        .route("/cloud/update", get(cloud_update))
        .route("/cloud/connected", get(cloud_connected))
        .route("/cloud/heartbeat", post(cloud_heartbeat))
        .with_state(store)
}

async fn cloud_get(State(store): State<Arc<PinStore>>, Query(q): Query<HashMap<String, String>>) -> Reply {
    let value = store.get_pin(param(&q, "token")?, param(&q, "pin")?).map_err(cloud_error)?;
    Ok(Json(json!({ "value": value.as_deref().map(coerce) })))
}

async fn cloud_update(State(store): State<Arc<PinStore>>, Query(q): Query<HashMap<String, String>>) -> Reply {
    store
        .update_pin(param(&q, "token")?, param(&q, "pin")?, param(&q, "value")?)
        .map_err(cloud_error)?;
    ok()
}

async fn cloud_connected(State(store): State<Arc<PinStore>>, Query(q): Query<HashMap<String, String>>) -> Reply {
    Ok(Json(json!({ "connected": store.is_connected(param(&q, "token")?) })))
}

#[derive(Deserialize)]
struct TokenBody {
    token: String,
}

async fn cloud_heartbeat(State(store): State<Arc<PinStore>>, Json(b): Json<TokenBody>) -> Reply {
    store.heartbeat(&b.token).map_err(cloud_error)?;
    ok()
}

// ---- signaling ----

#[derive(Clone)]
pub struct SignalingState {
    pub broker: Arc<Broker>,
    pub clock: Arc<dyn Clock>,
}

fn signal_error(e: SignalError) -> HttpError {
    match &e {
        SignalError::EmptyPeerId => HttpError::new(400, "empty_peer_id", &e),
        SignalError::Conflict(p) => HttpError::new(409, "conflict", &e).with("peer_id", json!(p)),
        SignalError::NoSuchPeer(p) => HttpError::new(404, "no_such_peer", &e).with("peer_id", json!(p)),
        SignalError::NoSuchSession(_) => HttpError::new(404, "no_such_session", &e),
        SignalError::StaleSession(_) => HttpError::new(410, "stale_session", &e),
        SignalError::UnknownProfile(p) => HttpError::new(400, "unknown_profile", &e).with("profile", json!(p)),
        SignalError::Transport(_) => HttpError::new(502, "transport", &e),
    }
}

pub fn signaling_router(state: SignalingState) -> Router {
    Router::new()
        .route("/peer/register", post(peer_register))
        .route("/peer/unregister", post(peer_unregister))
        .route("/peer/call", post(peer_call))
        .route("/peer/publish", post(peer_publish))
        .route("/peer/hangup", post(peer_hangup))
        .route("/peer/stream", get(peer_stream))
        .with_state(state)
}

#[derive(Deserialize)]
struct PeerBody {
    peer_id: String,
}

async fn peer_register(State(s): State<SignalingState>, Json(b): Json<PeerBody>) -> Reply {
    s.broker.register(&b.peer_id, s.clock.now_ms()).map_err(signal_error)?;
    ok()
}

async fn peer_unregister(State(s): State<SignalingState>, Json(b): Json<PeerBody>) -> Reply {
    s.broker.unregister(&b.peer_id, s.clock.now_ms());
    ok()
}

#[derive(Deserialize)]
struct CallBody {
    caller: String,
    callee: String,
    camera_profile: String,
}

async fn peer_call(State(s): State<SignalingState>, Json(b): Json<CallBody>) -> Reply {
    let id = s
        .broker
        .call(&b.caller, &b.callee, &b.camera_profile, s.clock.now_ms())
        .map_err(signal_error)?;
    let latency = s.broker.session(id).map(|m| m.latency_ms);
    Ok(Json(json!({ "session_id": id, "latency_ms": latency })))
}

async fn peer_publish(State(s): State<SignalingState>, Query(q): Query<HashMap<String, String>>, body: Bytes) -> Reply {
    let session_id: u64 = param(&q, "session_id")?
        .parse()
        .map_err(|_| HttpError::new(400, "bad_request", "session_id must be an integer"))?;
    let (frame, _) = Frame::from_tagged_pgm(&body).map_err(|e| HttpError::new(400, "bad_frame", e))?;
    let seq = s
        .broker
        .publish_frame(session_id, frame, s.clock.now_ms())
        .map_err(signal_error)?;
    Ok(Json(json!({ "seq": seq })))
}

#[derive(Deserialize)]
struct HangupBody {
    session_id: u64,
    #[serde(default = "default_hangup_reason")]
    reason: String,
}

fn default_hangup_reason() -> String {
    "hangup".into()
}

async fn peer_hangup(State(s): State<SignalingState>, Json(b): Json<HangupBody>) -> Reply {
    s.broker
        .hangup(b.session_id, &b.reason, s.clock.now_ms())
        .map_err(signal_error)?;
    ok()
}

async fn peer_stream(
    ws: WebSocketUpgrade,
    State(s): State<SignalingState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, HttpError> {
    let peer = param(&q, "peer_id")?.to_string();
    if !s.broker.is_registered(&peer) {
        return Err(signal_error(SignalError::NoSuchPeer(peer)));
    }
    Ok(ws.on_upgrade(move |socket| stream_frames(socket, s, peer)))
}

/// Pushes every delivered frame to the socket as a tagged binary PGM.
async fn stream_frames(socket: WebSocket, s: SignalingState, peer: String) {
    let (mut tx, mut rx) = socket.split();
    let mut tick = tokio::time::interval(STREAM_POLL);
    loop {
        tokio::select! {
            inbound = rx.next() => match inbound {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
            _ = tick.tick() => {
                if !s.broker.is_registered(&peer) {
                    let _ = tx.send(Message::Close(None)).await;
                    break;
                }
                for item in s.broker.take_inbox(&peer) {
                    let msg = match item {
                        InboxItem::Frame(f) => Message::Binary(
                            f.frame
                                .to_tagged_pgm(&[
                                    ("session", f.session_id.to_string()),
                                    ("seq", f.seq.to_string()),
                                    ("sent", f.sent_at.to_string()),
                                    ("delivered", f.delivered_at.to_string()),
                                    ("caller", f.caller),
                                ])
                                .into(),
                        ),
                        InboxItem::Hangup { session_id, reason } => Message::Text(
                            json!({ "type": "hangup", "session_id": session_id, "reason": reason })
                                .to_string()
                                .into(),
                        ),
                    };
                    if tx.send(msg).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}

// ---- orchestrator ----

/// Open device channels, keyed by device id.
#[derive(Default)]
pub struct DeviceHub {
    next_conn: AtomicU64,
    links: Mutex<HashMap<String, (u64, mpsc::UnboundedSender<ChannelMessage>)>>,
}

impl DeviceHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sends each message to its device. Messages for devices without a
    /// channel are dropped.
    pub fn route(&self, out: Vec<Outbound>) {
        let links = self.links.lock().unwrap();
        for o in out {
            match links.get(&o.device_id) {
                Some((_, tx)) => {
                    let _ = tx.send(o.msg);
                }
                None => tracing::debug!(device = %o.device_id, msg = o.msg.type_name(), "no channel, message dropped"),
            }
        }
    }

    /// Replaces any earlier channel of the device.
    fn attach(&self, device_id: &str) -> (u64, mpsc::UnboundedReceiver<ChannelMessage>) {
        let conn = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::unbounded_channel();
        self.links.lock().unwrap().insert(device_id.to_string(), (conn, tx));
        (conn, rx)
    }

    /// True when `conn` was still the device's current channel.
    fn detach(&self, device_id: &str, conn: u64) -> bool {
        let mut links = self.links.lock().unwrap();
        if links.get(device_id).is_some_and(|(c, _)| *c == conn) {
            links.remove(device_id);
            true
        } else {
            false
        }
    }

    pub fn connected(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.links.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }
}

#[derive(Clone)]
pub struct OrchestratorState {
    pub orch: Arc<Orchestrator>,
    pub clock: Arc<dyn Clock>,
    pub hub: Arc<DeviceHub>,
}

fn api_error(e: ApiError) -> HttpError {
    let err = HttpError::new(e.http_status(), e.kind(), &e);
    match e {
        ApiError::SlotTaken { next_free } => err.with("next_free", json!(iso8601(next_free))),
        _ => err,
    }
}

/// Orchestrator calls may block on a remote cloud, so they run off the
/// async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("orchestrator call panicked")
}

fn bearer(headers: &HeaderMap) -> Result<String, HttpError> {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .ok_or_else(|| api_error(ApiError::Unauthorized))
}

fn user_of(s: &OrchestratorState, headers: &HeaderMap) -> Result<String, HttpError> {
    s.orch.authenticate(&bearer(headers)?).map_err(api_error)
}

pub fn orchestrator_router(state: OrchestratorState) -> Router {
    Router::new()
        .route("/api/login", post(api_login))
        .route("/api/logout", post(api_logout))
        .route("/api/experiments", get(api_experiments))
        .route("/api/experiments/{id}/enter", post(api_enter))
        .route("/api/experiments/{id}/input", post(api_input))
        .route("/api/experiments/{id}/leave", post(api_leave))
        .route("/api/experiments/{id}/queue", get(api_queue))
        .route("/api/experiments/{id}/book", post(api_book))
        .route("/api/experiments/{id}/output", get(api_output))
        .route("/api/experiments/{id}/nodes", get(api_nodes))
        .route("/device/channel", get(device_channel))
        .with_state(state)
}

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    #[serde(alias = "password")]
    secret: String,
}

async fn api_login(State(s): State<OrchestratorState>, Json(b): Json<LoginBody>) -> Reply {
    let token = s.orch.login(&b.username, &b.secret).map_err(api_error)?;
    Ok(Json(json!({ "token": token, "username": b.username })))
}

async fn api_logout(State(s): State<OrchestratorState>, headers: HeaderMap) -> Reply {
    s.orch.logout(&bearer(&headers)?);
    ok()
}

async fn api_experiments(State(s): State<OrchestratorState>, headers: HeaderMap) -> Reply {
    user_of(&s, &headers)?;
    let orch = s.orch.clone();
    let catalog = blocking(move || orch.catalog()).await;
    Ok(Json(json!({ "experiments": catalog })))
}

#[derive(Deserialize)]
struct EnterBody {
    peer_id: String,
}

async fn api_enter(
    State(s): State<OrchestratorState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(b): Json<EnterBody>,
) -> Reply {
    let user = user_of(&s, &headers)?;
    let started = s.clock.now_ms();
    let (orch, u, e) = (s.orch.clone(), user.clone(), id.clone());
    let (mut status, out) = blocking(move || orch.enter(&u, &e, &b.peer_id, started)).await.map_err(api_error)?;
    s.hub.route(out);
    let deadline = started + s.orch.settings().ack_timeout_ms + ENTER_GRACE_MS;
    while matches!(status, EntryStatus::Pending { .. }) && s.clock.now_ms() < deadline {
        tokio::time::sleep(Duration::from_millis(20)).await;
        status = s.orch.status(&user, &id, s.clock.now_ms()).map_err(api_error)?;
    }
    Ok(Json(status.to_json()))
}

async fn api_input(
    State(s): State<OrchestratorState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(params): Json<Value>,
) -> Reply {
    let user = user_of(&s, &headers)?;
    let (orch, now) = (s.orch.clone(), s.clock.now_ms());
    let out = blocking(move || orch.submit_input(&user, &id, &params, now)).await.map_err(api_error)?;
    s.hub.route(out);
    ok()
}

async fn api_leave(State(s): State<OrchestratorState>, Path(id): Path<String>, headers: HeaderMap) -> Reply {
    let user = user_of(&s, &headers)?;
    let (orch, now) = (s.orch.clone(), s.clock.now_ms());
    let out = blocking(move || orch.leave(&user, &id, now)).await.map_err(api_error)?;
    s.hub.route(out);
    ok()
}

async fn api_queue(State(s): State<OrchestratorState>, Path(id): Path<String>, headers: HeaderMap) -> Reply {
    let user = user_of(&s, &headers)?;
    let status = s.orch.status(&user, &id, s.clock.now_ms()).map_err(api_error)?;
    Ok(Json(status.to_json()))
}

#[derive(Deserialize)]
struct BookBody {
    start: String,
    end: String,
}

async fn api_book(
    State(s): State<OrchestratorState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(b): Json<BookBody>,
) -> Reply {
    let user = user_of(&s, &headers)?;
    let parse = |field: &str, v: &str| {
        parse_iso8601(v).ok_or_else(|| HttpError::new(400, "bad_request", format!("{field}: not an ISO-8601 timestamp")))
    };
    let (start, end) = (parse("start", &b.start)?, parse("end", &b.end)?);
    let r = s.orch.book(&user, &id, start, end, s.clock.now_ms()).map_err(api_error)?;
    Ok(Json(r.to_json()))
}

async fn api_output(State(s): State<OrchestratorState>, Path(id): Path<String>, headers: HeaderMap) -> Reply {
    let user = user_of(&s, &headers)?;
    let orch = s.orch.clone();
    let snap = blocking(move || orch.output(&user, &id)).await.map_err(api_error)?;
    Ok(Json(serde_json::to_value(snap).expect("snapshot serializes")))
}

async fn api_nodes(State(s): State<OrchestratorState>, Path(id): Path<String>, headers: HeaderMap) -> Reply {
    user_of(&s, &headers)?;
    let nodes = s.orch.nodes(&id).map_err(api_error)?;
    Ok(Json(json!({ "nodes": nodes })))
}

async fn device_channel(ws: WebSocketUpgrade, State(s): State<OrchestratorState>) -> Response {
    ws.on_upgrade(move |socket| device_session(socket, s))
}

fn text(msg: &ChannelMessage) -> Message {
    Message::Text(msg.to_json().into())
}

/// Next channel message, skipping frames that are not JSON text. `None`
/// once the socket closes.
async fn next_message(rx: &mut SplitStream<WebSocket>) -> Option<Result<ChannelMessage, String>> {
    loop {
        match rx.next().await? {
            Ok(Message::Text(t)) => return Some(ChannelMessage::from_json(&t).map_err(|e| e.to_string())),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

async fn device_session(socket: WebSocket, s: OrchestratorState) {
    let (mut tx, mut rx) = socket.split();
    let first = tokio::time::timeout(AUTH_WAIT, next_message(&mut rx)).await;
    let Ok(Some(Ok(ChannelMessage::Auth {
        experiment_id,
        device_id,
        secret,
    }))) = first
    else {
        let fail = ChannelMessage::AuthFail {
            reason: "first message must be AUTH".into(),
        };
        let _ = tx.send(text(&fail)).await;
        let _ = tx.send(Message::Close(None)).await;
        return;
    };
    let (orch, dev, now) = (s.orch.clone(), device_id.clone(), s.clock.now_ms());
    let auth = blocking(move || orch.authorize_device(&experiment_id, &dev, &secret, now)).await;
    let (room, out) = match auth {
        Ok(ok) => ok,
        Err(reason) => {
            tracing::warn!(device = %device_id, %reason, "device rejected");
            let _ = tx.send(text(&ChannelMessage::AuthFail { reason })).await;
            let _ = tx.send(Message::Close(None)).await;
            return;
        }
    };
    let (conn, mut outbox) = s.hub.attach(&device_id);
    if tx.send(text(&ChannelMessage::AuthOk { room })).await.is_err() {
        s.hub.detach(&device_id, conn);
        return;
    }
    s.hub.route(out);
    loop {
        tokio::select! {
            inbound = next_message(&mut rx) => match inbound {
                Some(Ok(msg)) => {
                    let (orch, dev, now) = (s.orch.clone(), device_id.clone(), s.clock.now_ms());
                    let out = blocking(move || orch.device_message(&dev, msg, now)).await;
                    s.hub.route(out);
                }
                Some(Err(e)) => tracing::warn!(device = %device_id, error = %e, "unreadable channel message"),
                None => break,
            },
            outbound = outbox.recv() => match outbound {
                Some(msg) => {
                    if tx.send(text(&msg)).await.is_err() {
                        break;
                    }
                }
                // a newer channel for the same device took over
                None => break,
            },
        }
    }
    if s.hub.detach(&device_id, conn) {
        let (orch, dev, now) = (s.orch.clone(), device_id.clone(), s.clock.now_ms());
        let out = blocking(move || orch.device_disconnected(&dev, now)).await;
        s.hub.route(out);
    }
}
