//! A browser-like user over HTTP, for the tester and for tests.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rlabs_core::clock::{parse_iso8601, Clock, Millis, SystemClock};
use rlabs_core::image::Frame;
use rlabs_core::orchestrator::{ApiError, EntryStatus, OutputSnapshot};
use rlabs_core::signaling::MediaApi;
use rlabs_core::tester::{ClientError, LabClient};
use serde_json::{json, Value};
use tungstenite::Message;

use crate::agents::{connect_ws, is_timeout};
use crate::remote::{base_url, error_kind, finish, http_agent, HttpMedia};

/// A frame read from `/peer/stream`, with its header tags and the local
/// receive time.
#[derive(Debug, Clone)]
pub struct ReceivedFrame {
    pub frame: Frame,
    pub tags: BTreeMap<String, String>,
    pub received_at: Millis,
}

/// Background reader of one peer's `/peer/stream` socket.
pub struct FrameStream {
    stop: Arc<AtomicBool>,
    frames: Arc<Mutex<Vec<ReceivedFrame>>>,
    hangups: Arc<Mutex<Vec<Value>>>,
    handle: Option<JoinHandle<()>>,
}

impl FrameStream {
    /// Connects before returning, so frames delivered afterwards are seen.
    pub fn open(signaling_addr: &str, peer_id: &str) -> Result<Self, String> {
        let path = format!("/peer/stream?peer_id={peer_id}");
        let mut ws = connect_ws(signaling_addr, &path, Duration::from_secs(2), Duration::from_millis(20))?;
        let stop = Arc::new(AtomicBool::new(false));
        let frames = Arc::new(Mutex::new(Vec::new()));
        let hangups = Arc::new(Mutex::new(Vec::new()));
        let (s, f, h) = (stop.clone(), frames.clone(), hangups.clone());
        let handle = std::thread::spawn(move || {
            let clock = SystemClock::new();
            while !s.load(Ordering::SeqCst) {
                match ws.read() {
                    Ok(Message::Binary(bytes)) => match Frame::from_tagged_pgm(&bytes) {
                        Ok((frame, tags)) => f.lock().unwrap().push(ReceivedFrame {
                            frame,
                            tags,
                            received_at: clock.now_ms(),
                        }),
                        Err(e) => tracing::warn!(error = %e, "undecodable frame"),
                    },
                    Ok(Message::Text(t)) => {
                        if let Ok(v) = serde_json::from_str(&t) {
                            h.lock().unwrap().push(v);
                        }
                    }
                    Ok(Message::Close(_)) => break,
                    Ok(_) => {}
                    Err(e) if is_timeout(&e) => {}
                    Err(_) => break,
                }
            }
            let _ = ws.close(None);
            let _ = ws.flush();
        });
        Ok(Self {
            stop,
            frames,
            hangups,
            handle: Some(handle),
        })
    }

    pub fn drain(&self) -> Vec<ReceivedFrame> {
        std::mem::take(&mut *self.frames.lock().unwrap())
    }

    pub fn hangups(&self) -> Vec<Value> {
        self.hangups.lock().unwrap().clone()
    }

    pub fn is_closed(&self) -> bool {
        self.handle.as_ref().is_none_or(|h| h.is_finished())
    }
}

impl Drop for FrameStream {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Rebuilds the typed error from an `/api/*` error body.
pub fn api_error_from(status: u16, body: &Value) -> ClientError {
    let message = body.get("message").and_then(Value::as_str).unwrap_or_default().to_string();
    let err = match error_kind(body) {
        "unauthorized" => ApiError::Unauthorized,
        "forbidden" => ApiError::Forbidden(message),
        "bad_request" => ApiError::BadRequest(message),
        "not_found" => ApiError::NotFound(message),
        "conflict" => ApiError::Conflict(message),
        "slot_taken" => match body.get("next_free").and_then(Value::as_str).and_then(parse_iso8601) {
            Some(next_free) => ApiError::SlotTaken { next_free },
            None => return ClientError::Transport(format!("HTTP {status}: {body}")),
        },
        "experiment_offline" => ApiError::ExperimentOffline(message),
        _ => return ClientError::Transport(format!("HTTP {status}: {body}")),
    };
    ClientError::Api(err)
}

/// Parses the JSON form of an entry status, whose grant expiry is an
/// ISO-8601 string.
pub fn entry_status_from_json(v: &Value) -> Result<EntryStatus, String> {
    let mut v = v.clone();
    if let Some(s) = v.get("expires_at").and_then(Value::as_str) {
        let ms = parse_iso8601(s).ok_or_else(|| format!("bad expires_at {s:?}"))?;
        v["expires_at"] = json!(ms);
    }
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// [`LabClient`] against a running orchestrator and signaling service.
pub struct HttpLabClient {
    orchestrator: String,
    signaling: String,
    http: ureq::Agent,
    media: HttpMedia,
    clock: SystemClock,
    streams: HashMap<String, FrameStream>,
}

impl HttpLabClient {
    pub fn new(orchestrator_addr: &str, signaling_addr: &str) -> Self {
        Self {
            orchestrator: base_url(orchestrator_addr),
            signaling: signaling_addr.to_string(),
            // enter may be held open for the whole ACK window
            http: http_agent(Duration::from_secs(15)),
            media: HttpMedia::new(signaling_addr),
            clock: SystemClock::new(),
            streams: HashMap::new(),
        }
    }

    fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> Result<Value, ClientError> {
        let url = format!("{}{path}", self.orchestrator);
        let auth = token.map(|t| format!("Bearer {t}"));
        let sent = if method == "GET" {
            let mut req = self.http.get(&url);
            if let Some(a) = &auth {
                req = req.header("authorization", a);
            }
            req.call()
        } else {
            let mut req = self.http.post(&url);
            if let Some(a) = &auth {
                req = req.header("authorization", a);
            }
            req.send_json(body.unwrap_or_else(|| json!({})))
        };
        match finish(sent).map_err(ClientError::Transport)? {
            (200, v) => Ok(v),
            (status, v) => Err(api_error_from(status, &v)),
        }
    }

    /// Frames with their stream tags, for callers that need delivery times.
    pub fn take_received(&mut self, peer_id: &str) -> Vec<ReceivedFrame> {
        self.streams.get(peer_id).map(FrameStream::drain).unwrap_or_default()
    }
}

fn exp_path(exp_id: &str, action: &str) -> String {
    format!("/api/experiments/{exp_id}/{action}")
}

impl LabClient for HttpLabClient {
    fn now_ms(&mut self) -> Millis {
        self.clock.now_ms()
    }

    fn wait(&mut self, ms: Millis) {
        std::thread::sleep(Duration::from_millis(ms));
    }

    fn login(&mut self, username: &str, secret: &str) -> Result<String, ClientError> {
        let v = self.call("POST", "/api/login", None, Some(json!({ "username": username, "secret": secret })))?;
        v.get("token")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Transport(format!("login reply without token: {v}")))
    }

    fn logout(&mut self, token: &str) {
        let _ = self.call("POST", "/api/logout", Some(token), None);
    }

    fn register_peer(&mut self, peer_id: &str) -> Result<(), ClientError> {
        self.media
            .register(peer_id, 0)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let stream = FrameStream::open(&self.signaling, peer_id).map_err(ClientError::Transport)?;
        self.streams.insert(peer_id.to_string(), stream);
        Ok(())
    }

    fn unregister_peer(&mut self, peer_id: &str) {
        self.streams.remove(peer_id);
        self.media.unregister(peer_id, 0);
    }

    fn enter(&mut self, token: &str, exp_id: &str, peer_id: &str) -> Result<EntryStatus, ClientError> {
        let v = self.call("POST", &exp_path(exp_id, "enter"), Some(token), Some(json!({ "peer_id": peer_id })))?;
        entry_status_from_json(&v).map_err(ClientError::Transport)
    }

    fn status(&mut self, token: &str, exp_id: &str) -> Result<EntryStatus, ClientError> {
        let v = self.call("GET", &exp_path(exp_id, "queue"), Some(token), None)?;
        entry_status_from_json(&v).map_err(ClientError::Transport)
    }

    fn input(&mut self, token: &str, exp_id: &str, params: &Value) -> Result<(), ClientError> {
        self.call("POST", &exp_path(exp_id, "input"), Some(token), Some(params.clone()))
            .map(|_| ())
    }

    fn output(&mut self, token: &str, exp_id: &str) -> Result<OutputSnapshot, ClientError> {
        let v = self.call("GET", &exp_path(exp_id, "output"), Some(token), None)?;
        serde_json::from_value(v).map_err(|e| ClientError::Transport(e.to_string()))
    }

    fn leave(&mut self, token: &str, exp_id: &str) -> Result<(), ClientError> {
        self.call("POST", &exp_path(exp_id, "leave"), Some(token), None).map(|_| ())
    }

    fn take_frames(&mut self, peer_id: &str) -> Result<Vec<Frame>, ClientError> {
        Ok(self.take_received(peer_id).into_iter().map(|r| r.frame).collect())
    }
}
