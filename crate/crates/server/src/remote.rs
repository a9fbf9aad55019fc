//! Blocking HTTP clients for the pin cloud, the signaling broker and the
//! notification webhook.

use std::time::Duration;

use rlabs_core::clock::Millis;
use rlabs_core::cloud::{CloudApi, CloudError};
use rlabs_core::image::Frame;
use rlabs_core::signaling::{MediaApi, SignalError};
use rlabs_core::tester::WebhookTransport;
use serde_json::{json, Value};

pub(crate) const HTTP_TIMEOUT: Duration = Duration::from_secs(5);

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// `host:port` or a full URL, as an `http://` base without a trailing slash.
pub fn base_url(addr: &str) -> String {
    let addr = addr.trim_end_matches('/');
    if addr.starts_with("http://") || addr.starts_with("https://") {
        addr.to_string()
    } else {
        format!("http://{addr}")
    }
}

/// The same base with a `ws://` scheme.
pub fn ws_url(addr: &str, path: &str) -> String {
    let base = base_url(addr);
    let rest = base.trim_start_matches("http://").trim_start_matches("https://");
    format!("ws://{rest}{path}")
}

/// Status code and JSON body of a finished request.
pub(crate) fn finish(result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<(u16, Value), String> {
    let mut resp = result.map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    let body = if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    Ok((status, body))
}

pub(crate) fn error_kind(body: &Value) -> &str {
    body.get("error").and_then(Value::as_str).unwrap_or("")
}

/// Pin values come back coerced to numbers; turn them back into text.
fn pin_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.to_string(),
            (None, Some(f)) if f.fract() == 0.0 && f.abs() < 1e15 => (f as i64).to_string(),
            _ => n.to_string(),
        }),
        other => Some(other.to_string()),
    }
}

/// [`CloudApi`] over the `/cloud/*` endpoints.
pub struct HttpCloud {
    base: String,
    http: ureq::Agent,
}

impl HttpCloud {
    pub fn new(addr: &str) -> Self {
        Self {
            base: base_url(addr),
            http: http_agent(HTTP_TIMEOUT),
        }
    }

    fn get(&self, path: &str, query: &[(&str, &str)]) -> Result<(u16, Value), CloudError> {
        let mut req = self.http.get(format!("{}{path}", self.base));
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        finish(req.call()).map_err(CloudError::Transport)
    }
}

fn cloud_error(status: u16, body: &Value, pin: &str) -> CloudError {
    match (status, error_kind(body)) {
        (_, "unknown_token") => CloudError::UnknownToken,
        (_, "bad_pin") => CloudError::BadPin(pin.to_string()),
        _ => CloudError::Transport(format!("HTTP {status}: {body}")),
    }
}

impl CloudApi for HttpCloud {
    fn update_pin(&self, token: &str, pin: &str, value: &str) -> Result<(), CloudError> {
        match self.get("/cloud/update", &[("token", token), ("pin", pin), ("value", value)])? {
            (200, _) => Ok(()),
            (status, body) => Err(cloud_error(status, &body, pin)),
        }
    }

    fn get_pin(&self, token: &str, pin: &str) -> Result<Option<String>, CloudError> {
        match self.get("/cloud/get", &[("token", token), ("pin", pin)])? {
            (200, body) => Ok(body.get("value").and_then(pin_text)),
            (status, body) => Err(cloud_error(status, &body, pin)),
        }
    }

    fn heartbeat(&self, token: &str) -> Result<(), CloudError> {
        let sent = self.http.post(format!("{}/cloud/heartbeat", self.base)).send_json(json!({ "token": token }));
        match finish(sent).map_err(CloudError::Transport)? {
            (200, _) => Ok(()),
            (status, body) => Err(cloud_error(status, &body, "")),
        }
    }

    fn is_connected(&self, token: &str) -> bool {
        matches!(
            self.get("/cloud/connected", &[("token", token)]),
            Ok((200, body)) if body.get("connected") == Some(&Value::Bool(true))
        )
    }
}

/// [`MediaApi`] over the `/peer/*` endpoints.
pub struct HttpMedia {
    base: String,
    http: ureq::Agent,
}

impl HttpMedia {
    pub fn new(addr: &str) -> Self {
        Self {
            base: base_url(addr),
            http: http_agent(HTTP_TIMEOUT),
        }
    }

    fn post(&self, path: &str, body: Value) -> Result<(u16, Value), SignalError> {
        finish(self.http.post(format!("{}{path}", self.base)).send_json(body)).map_err(SignalError::Transport)
    }
}

fn signal_error(status: u16, body: &Value, peer: &str, session: u64) -> SignalError {
    let named_peer = body.get("peer_id").and_then(Value::as_str).unwrap_or(peer).to_string();
    match error_kind(body) {
        "empty_peer_id" => SignalError::EmptyPeerId,
        "conflict" => SignalError::Conflict(named_peer),
        "no_such_peer" => SignalError::NoSuchPeer(named_peer),
        "no_such_session" => SignalError::NoSuchSession(session),
        "stale_session" => SignalError::StaleSession(session),
        "unknown_profile" => {
            SignalError::UnknownProfile(body.get("profile").and_then(Value::as_str).unwrap_or_default().to_string())
        }
        _ => SignalError::Transport(format!("HTTP {status}: {body}")),
    }
}

impl MediaApi for HttpMedia {
    fn register(&self, peer_id: &str, _now: Millis) -> Result<(), SignalError> {
        match self.post("/peer/register", json!({ "peer_id": peer_id }))? {
            (200, _) => Ok(()),
            (status, body) => Err(signal_error(status, &body, peer_id, 0)),
        }
    }

    fn unregister(&self, peer_id: &str, _now: Millis) {
        if let Err(e) = self.post("/peer/unregister", json!({ "peer_id": peer_id })) {
            tracing::warn!(%peer_id, error = %e, "unregister failed");
        }
    }

    fn call(&self, caller: &str, callee: &str, profile: &str, _now: Millis) -> Result<u64, SignalError> {
        let body = json!({ "caller": caller, "callee": callee, "camera_profile": profile });
        match self.post("/peer/call", body)? {
            (200, body) => body
                .get("session_id")
                .and_then(Value::as_u64)
                .ok_or_else(|| SignalError::Transport(format!("call reply without session_id: {body}"))),
            (status, body) => Err(signal_error(status, &body, callee, 0)),
        }
    }

    fn publish_frame(&self, session_id: u64, frame: Frame, _now: Millis) -> Result<u64, SignalError> {
        let pgm = frame.to_tagged_pgm(&[]);
        let sent = self
            .http
            .post(format!("{}/peer/publish", self.base))
            .query("session_id", session_id.to_string())
            .header("content-type", "image/x-portable-graymap")
            .send(&pgm[..]);
        match finish(sent).map_err(SignalError::Transport)? {
            (200, body) => Ok(body.get("seq").and_then(Value::as_u64).unwrap_or_default()),
            (status, body) => Err(signal_error(status, &body, "", session_id)),
        }
    }

    fn hangup(&self, session_id: u64, reason: &str, _now: Millis) -> Result<(), SignalError> {
        match self.post("/peer/hangup", json!({ "session_id": session_id, "reason": reason }))? {
            (200, _) => Ok(()),
            (status, body) => Err(signal_error(status, &body, "", session_id)),
        }
    }
}

/// Posts notification bodies with a short timeout.
pub struct UreqWebhook {
    http: ureq::Agent,
}

impl UreqWebhook {
    pub fn new(timeout: Duration) -> Self {
        Self {
            http: http_agent(timeout),
        }
    }
}

impl Default for UreqWebhook {
    fn default() -> Self {
        Self::new(HTTP_TIMEOUT)
    }
}

impl WebhookTransport for UreqWebhook {
    fn post_json(&self, url: &str, body: &str) -> Result<(), String> {
        let sent = self.http.post(url).header("content-type", "application/json").send(body);
        let (status, _) = finish(sent)?;
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(format!("webhook answered HTTP {status}"))
        }
    }
}
