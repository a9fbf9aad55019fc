//! Backend server state: accounts, experiment catalog, node multiplexing,
//! wait queues, slot booking and the session lifecycle.
//!
//! The orchestrator is sans-io. Every operation takes the current time and
//! returns the channel messages that must be delivered to device agents.

mod accounts;
mod booking;
mod queue;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accounts::Accounts;
pub use booking::{BookingError, Calendar, Reservation, ReservationStatus, SLOT_MS};
pub use queue::{QueueEntry, Ticket, WaitQueue};

use crate::agent::AgentRole;
use crate::clock::{iso8601, Millis, MINUTE, SECOND};
use crate::cloud::{coerce, pins, CloudApi};
use crate::config::PlatformConfig;
use crate::physics::ExperimentKind;
use crate::protocol::{ChannelMessage, EndReason, ErrorCode, InputParams};

pub const ACK_TIMEOUT_MS: Millis = 5 * SECOND;
pub const QUEUE_IDLE_MS: Millis = 30 * MINUTE;
/// Extra time the server waits for a device to report its own session end.
pub const EXPIRY_GRACE_MS: Millis = SECOND;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("no capacity; next free slot starts at {}", iso8601(*next_free))]
    SlotTaken { next_free: Millis },
    #[error("experiment {0} is offline")]
    ExperimentOffline(String),
}

impl ApiError {
    pub fn http_status(&self) -> u16 {
        match self {
            ApiError::Unauthorized => 401,
            ApiError::Forbidden(_) => 403,
            ApiError::BadRequest(_) => 400,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) | ApiError::SlotTaken { .. } => 409,
            ApiError::ExperimentOffline(_) => 503,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "conflict",
            ApiError::SlotTaken { .. } => "slot_taken",
            ApiError::ExperimentOffline(_) => "experiment_offline",
        }
    }
}

/// The three conditions a node must meet before it is offered to a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    Cloud,
    Occupied,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Availability {
    Available,
    Unavailable { reason: Leg },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user: String,
    pub node_id: String,
    pub started_at: Millis,
    pub expires_at: Millis,
    pub user_peer_id: String,
}

/// A SESSION_START sent to a node, waiting for every device to ACK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub session_id: String,
    pub entry: QueueEntry,
    pub started_at: Millis,
    pub deadline: Millis,
    pub acked: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeStatus {
    Vacant,
    Probing(Probe),
    Occupied(SessionRecord),
    /// A probe went unanswered; cleared when a device of the node
    /// authorizes again.
    Offline,
}

impl NodeStatus {
    pub fn name(&self) -> &'static str {
        match self {
            NodeStatus::Vacant => "vacant",
            NodeStatus::Probing(_) => "probing",
            NodeStatus::Occupied(_) => "occupied",
            NodeStatus::Offline => "offline",
        }
    }
}

/// Where a user stands with one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryStatus {
    Pending { node_id: String, session_id: String },
    Granted { node_id: String, session_id: String, expires_at: Millis },
    Queued { position: usize, token: u64 },
    /// Every node went offline while the user was waiting.
    Offline,
    Idle,
}

impl EntryStatus {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            EntryStatus::Granted {
                node_id,
                session_id,
                expires_at,
            } => serde_json::json!({
                "status": "granted",
                "node_id": node_id,
                "session_id": session_id,
                "expires_at": iso8601(*expires_at),
            }),
            other => serde_json::to_value(other).expect("status serializes"),
        }
    }
}

/// A channel message addressed to one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub device_id: String,
    pub msg: ChannelMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSnapshot {
    pub node_id: String,
    pub session_id: String,
    pub pins: BTreeMap<String, serde_json::Value>,
    pub cloud_connected: bool,
    /// Frame ids (`node/camera`) of the node's cameras.
    pub cameras: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub kind: ExperimentKind,
    pub title: String,
    pub nodes: usize,
    pub available: usize,
    pub busy: usize,
    pub offline: usize,
    pub queue_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeView {
    pub node_id: String,
    pub status: String,
    pub availability: Availability,
    pub user: Option<String>,
    pub session_id: Option<String>,
    pub devices_connected: usize,
    pub devices: usize,
    pub last_ack_latency_ms: Option<Millis>,
    pub last_error: Option<ErrorCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    DeviceAuthorized { device_id: String, node_id: String },
    DeviceRejected { device_id: String, reason: String },
    DeviceDisconnected { device_id: String, node_id: String },
    DeviceError { device_id: String, node_id: String, code: ErrorCode },
    Queued { user: String, token: u64, position: usize },
    Dequeued { user: String, token: u64, why: String },
    ProbeStarted { node_id: String, session_id: String, user: String, token: u64 },
    ProbeFailed { node_id: String, session_id: String, user: String, reason: Leg },
    ProbeCancelled { node_id: String, session_id: String, user: String },
    Granted { node_id: String, session_id: String, user: String, token: u64, ack_latency_ms: Millis },
    SessionEnded { node_id: String, session_id: String, user: String, reason: EndReason },
    InputRelayed { node_id: String, session_id: String, params: InputParams },
    Booked { reservation_id: u64, user: String, start: Millis, end: Millis },
    ReservationActive { user: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchEvent {
    pub ts: Millis,
    pub experiment_id: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Settings {
    pub session_duration_s: u64,
    pub ack_timeout_ms: Millis,
    pub queue_idle_ms: Millis,
    pub expiry_grace_ms: Millis,
}

impl Settings {
    pub fn from_config(cfg: &PlatformConfig) -> Self {
        Self {
            session_duration_s: cfg.session_duration_s,
            ack_timeout_ms: ACK_TIMEOUT_MS,
            queue_idle_ms: QUEUE_IDLE_MS,
            expiry_grace_ms: EXPIRY_GRACE_MS,
        }
    }
}

#[derive(Debug)]
struct DeviceLink {
    device_id: String,
    secret: String,
    token: String,
    role: AgentRole,
    connected: bool,
}

#[derive(Debug)]
struct NodeRuntime {
    node_id: String,
    devices: Vec<DeviceLink>,
    cameras: Vec<String>,
    status: NodeStatus,
    last_ack_latency_ms: Option<Millis>,
    last_error: Option<ErrorCode>,
}

impl NodeRuntime {
    fn control(&self) -> &DeviceLink {
        self.devices
            .iter()
            .find(|d| d.role == AgentRole::Control)
            .expect("validated config has a control device per node")
    }

    fn all_connected(&self) -> bool {
        self.devices.iter().all(|d| d.connected)
    }

    fn session_end_to_all(&self, session_id: &str, reason: EndReason, skip: Option<&str>, out: &mut Vec<Outbound>) {
        for d in &self.devices {
            if Some(d.device_id.as_str()) != skip {
                out.push(Outbound {
                    device_id: d.device_id.clone(),
                    msg: ChannelMessage::SessionEnd {
                        session_id: session_id.to_string(),
                        reason,
                    },
                });
            }
        }
    }
}

#[derive(Debug)]
struct Desk {
    id: String,
    kind: ExperimentKind,
    title: String,
    nodes: Vec<NodeRuntime>,
    queue: WaitQueue,
    calendar: Calendar,
    notices: HashMap<String, EntryStatus>,
}

impl Desk {
    fn status_of(&self, user: &str) -> EntryStatus {
        for n in &self.nodes {
            match &n.status {
                NodeStatus::Occupied(s) if s.user == user => {
                    return EntryStatus::Granted {
                        node_id: n.node_id.clone(),
                        session_id: s.session_id.clone(),
                        expires_at: s.expires_at,
                    }
                }
                NodeStatus::Probing(p) if p.entry.user == user => {
                    return EntryStatus::Pending {
                        node_id: n.node_id.clone(),
                        session_id: p.session_id.clone(),
                    }
                }
                _ => {}
            }
        }
        if let Some(t) = self.queue.ticket(user) {
            return EntryStatus::Queued {
                position: t.position,
                token: t.token,
            };
        }
        self.notices.get(user).cloned().unwrap_or(EntryStatus::Idle)
    }

    fn involves(&self, user: &str) -> bool {
        matches!(
            self.status_of(user),
            EntryStatus::Granted { .. } | EntryStatus::Pending { .. } | EntryStatus::Queued { .. }
        )
    }

    fn node_of_device(&self, device_id: &str) -> Option<(usize, usize)> {
        self.nodes.iter().enumerate().find_map(|(ni, n)| {
            n.devices
                .iter()
                .position(|d| d.device_id == device_id)
                .map(|di| (ni, di))
        })
    }
}

/// Side effects gathered while an experiment desk is locked.
struct Effects {
    now: Millis,
    out: Vec<Outbound>,
    events: Vec<EventKind>,
    touched_users: Vec<String>,
}

impl Effects {
    fn new(now: Millis) -> Self {
        Self {
            now,
            out: Vec::new(),
            events: Vec::new(),
            touched_users: Vec::new(),
        }
    }
}

pub struct Orchestrator {
    settings: Settings,
    cloud: Arc<dyn CloudApi>,
    desks: BTreeMap<String, Mutex<Desk>>,
    device_index: HashMap<String, String>,
    /// user -> the one experiment they are entered in
    claims: Mutex<HashMap<String, String>>,
    accounts: Mutex<Accounts>,
    next_session: AtomicU64,
    events: Mutex<Vec<OrchEvent>>,
    session_log: Option<Mutex<File>>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("settings", &self.settings)
            .field("experiments", &self.desks.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Orchestrator {
    pub fn new(cfg: &PlatformConfig, cloud: Arc<dyn CloudApi>) -> Self {
        Self::with_settings(cfg, cloud, Settings::from_config(cfg))
    }

    pub fn with_settings(cfg: &PlatformConfig, cloud: Arc<dyn CloudApi>, settings: Settings) -> Self {
        let mut accounts = Accounts::new(cfg.seed);
        for u in cfg.accounts() {
            accounts.add_user(&u.username, &u.secret);
        }
        let mut desks = BTreeMap::new();
        let mut device_index = HashMap::new();
        for exp in &cfg.experiments {
            let mut nodes: Vec<NodeRuntime> = exp
                .nodes
                .iter()
                .map(|n| NodeRuntime {
                    node_id: n.node_id.clone(),
                    devices: n
                        .devices
                        .iter()
                        .map(|d| {
                            device_index.insert(d.device_id.clone(), exp.id.clone());
                            DeviceLink {
                                device_id: d.device_id.clone(),
                                secret: d.secret.clone(),
                                token: d.token.clone(),
                                role: d.role,
                                connected: false,
                            }
                        })
                        .collect(),
                    cameras: n.camera_ids(),
                    status: NodeStatus::Vacant,
                    last_ack_latency_ms: None,
                    last_error: None,
                })
                .collect();
            nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
            desks.insert(
                exp.id.clone(),
                Mutex::new(Desk {
                    id: exp.id.clone(),
                    kind: exp.kind,
                    title: exp.title.clone(),
                    nodes,
                    queue: WaitQueue::new(),
                    calendar: Calendar::new(),
                    notices: HashMap::new(),
                }),
            );
        }
        Self {
            settings,
            cloud,
            desks,
            device_index,
            claims: Mutex::new(HashMap::new()),
            accounts: Mutex::new(accounts),
            next_session: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
            session_log: None,
        }
    }

    /// Appends every event to `path` as newline-delimited JSON.
    pub fn with_session_log(mut self, path: &Path) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.session_log = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn settings(&self) -> Settings {
        self.settings
    }

    pub fn experiment_ids(&self) -> Vec<String> {
        self.desks.keys().cloned().collect()
    }

    pub fn events(&self) -> Vec<OrchEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn events_since(&self, from: usize) -> Vec<OrchEvent> {
        let ev = self.events.lock().unwrap();
        ev.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    // ---- accounts ----

    pub fn login(&self, username: &str, secret: &str) -> Result<String, ApiError> {
        self.accounts
            .lock()
            .unwrap()
            .login(username, secret)
            .ok_or(ApiError::Unauthorized)
    }

    pub fn authenticate(&self, token: &str) -> Result<String, ApiError> {
        self.accounts
            .lock()
            .unwrap()
            .authenticate(token)
            .ok_or(ApiError::Unauthorized)
    }

    pub fn logout(&self, token: &str) {
        self.accounts.lock().unwrap().logout(token);
    }

    // ---- read side ----

    fn desk(&self, exp_id: &str) -> Result<&Mutex<Desk>, ApiError> {
        self.desks
            .get(exp_id)
            .ok_or_else(|| ApiError::NotFound(format!("experiment {exp_id:?}")))
    }

    fn legs(&self, node: &NodeRuntime) -> Availability {
        let unavailable = |reason| Availability::Unavailable { reason };
        if !node.devices.iter().all(|d| self.cloud.is_connected(&d.token)) {
            return unavailable(Leg::Cloud);
        }
        if matches!(node.status, NodeStatus::Probing(_) | NodeStatus::Occupied(_)) {
            return unavailable(Leg::Occupied);
        }
        let flag = self.cloud.get_pin(&node.control().token, pins::FLAG).ok().flatten();
        if flag.as_deref() == Some(pins::FLAG_OCCUPIED) {
            return unavailable(Leg::Occupied);
        }
        if !node.all_connected() || node.status == NodeStatus::Offline {
            return unavailable(Leg::Stream);
        }
        Availability::Available
    }

    fn has_capacity(&self, desk: &Desk) -> bool {
        desk.nodes.iter().any(|n| match n.status {
            NodeStatus::Probing(_) | NodeStatus::Occupied(_) => true,
            NodeStatus::Vacant => self.legs(n) == Availability::Available,
            NodeStatus::Offline => false,
        })
    }

    pub fn check_availability(&self, exp_id: &str, node_id: &str) -> Result<Availability, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        let node = desk
            .nodes
            .iter()
            .find(|n| n.node_id == node_id)
            .ok_or_else(|| ApiError::NotFound(format!("node {node_id:?}")))?;
        Ok(self.legs(node))
    }

    pub fn catalog(&self) -> Vec<CatalogEntry> {
        self.desks
            .values()
            .map(|m| {
                let desk = m.lock().unwrap();
                let mut entry = CatalogEntry {
                    id: desk.id.clone(),
                    kind: desk.kind,
                    title: desk.title.clone(),
                    nodes: desk.nodes.len(),
                    available: 0,
                    busy: 0,
                    offline: 0,
                    queue_length: desk.queue.len(),
                };
                for n in &desk.nodes {
                    match self.legs(n) {
                        Availability::Available => entry.available += 1,
                        Availability::Unavailable { reason: Leg::Occupied } => entry.busy += 1,
                        Availability::Unavailable { .. } => entry.offline += 1,
                    }
                }
                entry
            })
            .collect()
    }

    pub fn nodes(&self, exp_id: &str) -> Result<Vec<NodeView>, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        Ok(desk
            .nodes
            .iter()
            .map(|n| {
                let (user, session_id) = match &n.status {
                    NodeStatus::Occupied(s) => (Some(s.user.clone()), Some(s.session_id.clone())),
                    NodeStatus::Probing(p) => (Some(p.entry.user.clone()), Some(p.session_id.clone())),
                    _ => (None, None),
                };
                NodeView {
                    node_id: n.node_id.clone(),
                    status: n.status.name().to_string(),
                    availability: self.legs(n),
                    user,
                    session_id,
                    devices_connected: n.devices.iter().filter(|d| d.connected).count(),
                    devices: n.devices.len(),
                    last_ack_latency_ms: n.last_ack_latency_ms,
                    last_error: n.last_error,
                }
            })
            .collect())
    }

    pub fn sessions(&self, exp_id: &str) -> Result<Vec<SessionRecord>, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        Ok(desk
            .nodes
            .iter()
            .filter_map(|n| match &n.status {
                NodeStatus::Occupied(s) => Some(s.clone()),
                _ => None,
            })
            .collect())
    }

    pub fn queue_snapshot(&self, exp_id: &str) -> Result<Vec<QueueEntry>, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        Ok(desk.queue.iter().cloned().collect())
    }

    pub fn reservations(&self, exp_id: &str) -> Result<Vec<Reservation>, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        Ok(desk.calendar.reservations().to_vec())
    }

    /// The user's standing with an experiment; a queued user is marked as
    /// still waiting.
    pub fn status(&self, user: &str, exp_id: &str, now: Millis) -> Result<EntryStatus, ApiError> {
        let mut desk = self.desk(exp_id)?.lock().unwrap();
        desk.queue.touch(user, now);
        Ok(desk.status_of(user))
    }

    pub fn output(&self, user: &str, exp_id: &str) -> Result<OutputSnapshot, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        let (node, session) = desk
            .nodes
            .iter()
            .find_map(|n| match &n.status {
                NodeStatus::Occupied(s) if s.user == user => Some((n, s)),
                _ => None,
            })
            .ok_or_else(|| ApiError::Forbidden("no active session".into()))?;
        let token = &node.control().token;
        let mut pin_values = BTreeMap::new();
        for pin in [pins::POSITION_A, pins::POSITION_B, pins::FLAG, pins::ERROR] {
            if let Ok(Some(v)) = self.cloud.get_pin(token, pin) {
                pin_values.insert(pin.to_string(), coerce(&v));
            }
        }
        Ok(OutputSnapshot {
            node_id: node.node_id.clone(),
            session_id: session.session_id.clone(),
            pins: pin_values,
            cloud_connected: node.devices.iter().all(|d| self.cloud.is_connected(&d.token)),
            cameras: node.cameras.clone(),
        })
    }

    // ---- user operations ----

    pub fn enter(&self, user: &str, exp_id: &str, peer_id: &str, now: Millis) -> Result<(EntryStatus, Vec<Outbound>), ApiError> {
        if peer_id.trim().is_empty() {
            return Err(ApiError::BadRequest("peer_id must not be empty".into()));
        }
        let mut desk = self.desk(exp_id)?.lock().unwrap();
        let mut fx = Effects::new(now);
        {
            let mut claims = self.claims.lock().unwrap();
            if let Some(other) = claims.get(user) {
                if other != exp_id {
                    return Err(ApiError::Conflict(format!("already entered in experiment {other}")));
                }
            }
            if desk.involves(user) {
                desk.queue.touch(user, now);
                return Ok((desk.status_of(user), Vec::new()));
            }
            if !self.has_capacity(&desk) {
                return Err(ApiError::ExperimentOffline(exp_id.to_string()));
            }
            claims.insert(user.to_string(), exp_id.to_string());
        }
        desk.notices.remove(user);
        let ticket = desk.queue.join(user, peer_id, now);
        fx.events.push(EventKind::Queued {
            user: user.to_string(),
            token: ticket.token,
            position: ticket.position,
        });
        self.dispatch(&mut desk, &mut fx);
        let status = desk.status_of(user);
        Ok((status, self.finish(&desk, fx)))
    }

    pub fn leave(&self, user: &str, exp_id: &str, now: Millis) -> Result<Vec<Outbound>, ApiError> {
        let mut desk = self.desk(exp_id)?.lock().unwrap();
        let mut fx = Effects::new(now);
        let occupied = desk.nodes.iter().position(|n| match &n.status {
            NodeStatus::Occupied(s) => s.user == user,
            NodeStatus::Probing(p) => p.entry.user == user,
            _ => false,
        });
        if let Some(i) = occupied {
            match desk.nodes[i].status.clone() {
                NodeStatus::Occupied(_) => self.release(&mut desk, i, EndReason::UserLeft, None, &mut fx),
                NodeStatus::Probing(p) => {
                    let node = &mut desk.nodes[i];
                    node.session_end_to_all(&p.session_id, EndReason::Cancelled, None, &mut fx.out);
                    node.status = NodeStatus::Vacant;
                    fx.events.push(EventKind::ProbeCancelled {
                        node_id: node.node_id.clone(),
                        session_id: p.session_id,
                        user: user.to_string(),
                    });
                }
                _ => unreachable!(),
            }
        } else if let Some(e) = desk.queue.remove(user) {
            fx.events.push(EventKind::Dequeued {
                user: e.user,
                token: e.token,
                why: "left".into(),
            });
        }
        desk.notices.remove(user);
        fx.touched_users.push(user.to_string());
        self.dispatch(&mut desk, &mut fx);
        Ok(self.finish(&desk, fx))
    }

    pub fn submit_input(&self, user: &str, exp_id: &str, raw: &serde_json::Value, now: Millis) -> Result<Vec<Outbound>, ApiError> {
        let desk = self.desk(exp_id)?.lock().unwrap();
        let mut fx = Effects::new(now);
        let (node, session) = desk
            .nodes
            .iter()
            .find_map(|n| match &n.status {
                NodeStatus::Occupied(s) if s.user == user => Some((n, s)),
                _ => None,
            })
            .ok_or_else(|| ApiError::Forbidden("no active session".into()))?;
        let params = InputParams::parse(desk.kind, raw).map_err(ApiError::BadRequest)?;
        let control = node.control();
        let body = serde_json::to_string(&params).expect("params serialize");
        // a missing pin write is not fatal; the channel message still carries the command
        let _ = self.cloud.update_pin(&control.token, pins::INPUT, &body);
        fx.out.push(Outbound {
            device_id: control.device_id.clone(),
            msg: ChannelMessage::Input {
                session_id: session.session_id.clone(),
                params,
            },
        });
        fx.events.push(EventKind::InputRelayed {
            node_id: node.node_id.clone(),
            session_id: session.session_id.clone(),
            params,
        });
        Ok(self.finish(&desk, fx))
    }

    pub fn book(&self, user: &str, exp_id: &str, start: Millis, end: Millis, now: Millis) -> Result<Reservation, ApiError> {
        let mut desk = self.desk(exp_id)?.lock().unwrap();
        let pool = desk.nodes.len();
        let id = desk.id.clone();
        let r = desk.calendar.book(user, &id, start, end, now, pool).map_err(|e| match e {
            BookingError::Conflict { next_free } => ApiError::SlotTaken { next_free },
            other => ApiError::BadRequest(other.to_string()),
        })?;
        let mut fx = Effects::new(now);
        fx.events.push(EventKind::Booked {
            reservation_id: r.id,
            user: user.to_string(),
            start,
            end,
        });
        self.finish(&desk, fx);
        Ok(r)
    }

    // ---- device channel ----

    /// Checks device credentials. On success returns the room (node id) and
    /// any messages the device should receive right after AUTH_OK.
    pub fn authorize_device(
        &self,
        exp_id: &str,
        device_id: &str,
        secret: &str,
        now: Millis,
    ) -> Result<(String, Vec<Outbound>), String> {
        let mut fx = Effects::new(now);
        let known_exp = self.device_index.get(device_id);
        let Some(m) = known_exp.filter(|e| *e == exp_id).and_then(|e| self.desks.get(e)) else {
            self.log(exp_id, now, vec![EventKind::DeviceRejected {
                device_id: device_id.to_string(),
                reason: "unknown device".into(),
            }]);
            return Err("unknown device for this experiment".into());
        };
        let mut desk = m.lock().unwrap();
        let (ni, di) = desk.node_of_device(device_id).expect("indexed device");
        if desk.nodes[ni].devices[di].secret != secret {
            fx.events.push(EventKind::DeviceRejected {
                device_id: device_id.to_string(),
                reason: "bad secret".into(),
            });
            self.finish(&desk, fx);
            return Err("bad credentials".into());
        }
        let node = &mut desk.nodes[ni];
        node.devices[di].connected = true;
        if node.status == NodeStatus::Offline {
            node.status = NodeStatus::Vacant;
        }
        if node.status == NodeStatus::Vacant {
            let _ = self.cloud.update_pin(&node.control().token, pins::FLAG, pins::FLAG_VACANT);
        }
        let room = node.node_id.clone();
        fx.events.push(EventKind::DeviceAuthorized {
            device_id: device_id.to_string(),
            node_id: room.clone(),
        });
        self.dispatch(&mut desk, &mut fx);
        Ok((room, self.finish(&desk, fx)))
    }

    pub fn device_message(&self, device_id: &str, msg: ChannelMessage, now: Millis) -> Vec<Outbound> {
        let Some(m) = self.device_index.get(device_id).and_then(|e| self.desks.get(e)) else {
            return Vec::new();
        };
        let mut desk = m.lock().unwrap();
        let Some((ni, _)) = desk.node_of_device(device_id) else {
            return Vec::new();
        };
        let mut fx = Effects::new(now);
        self.expire_probes(&mut desk, &mut fx);
        match msg {
            ChannelMessage::Ack { session_id } => self.on_ack(&mut desk, ni, device_id, session_id, &mut fx),
            ChannelMessage::SessionEnd { session_id, reason } => {
                let node = &desk.nodes[ni];
                match &node.status {
                    NodeStatus::Occupied(s) if s.session_id == session_id => {
                        self.release(&mut desk, ni, reason, Some(device_id), &mut fx);
                    }
                    NodeStatus::Probing(p) if p.session_id == session_id => {
                        self.fail_probe(&mut desk, ni, Leg::Stream, &mut fx);
                    }
                    _ => {}
                }
            }
            ChannelMessage::Error { code, .. } => {
                let node = &mut desk.nodes[ni];
                node.last_error = Some(code);
                fx.events.push(EventKind::DeviceError {
                    device_id: device_id.to_string(),
                    node_id: node.node_id.clone(),
                    code,
                });
            }
            _ => {}
        }
        self.dispatch(&mut desk, &mut fx);
        self.finish(&desk, fx)
    }

    /// The device channel closed. Any session on the node ends.
    pub fn device_disconnected(&self, device_id: &str, now: Millis) -> Vec<Outbound> {
        let Some(m) = self.device_index.get(device_id).and_then(|e| self.desks.get(e)) else {
            return Vec::new();
        };
        let mut desk = m.lock().unwrap();
        let (ni, di) = desk.node_of_device(device_id).expect("indexed device");
        if !desk.nodes[ni].devices[di].connected {
            return Vec::new();
        }
        let mut fx = Effects::new(now);
        desk.nodes[ni].devices[di].connected = false;
        fx.events.push(EventKind::DeviceDisconnected {
            device_id: device_id.to_string(),
            node_id: desk.nodes[ni].node_id.clone(),
        });
        match desk.nodes[ni].status {
            NodeStatus::Occupied(_) => self.release(&mut desk, ni, EndReason::Disconnected, Some(device_id), &mut fx),
            NodeStatus::Probing(_) => self.fail_probe(&mut desk, ni, Leg::Stream, &mut fx),
            _ => {}
        }
        self.dispatch(&mut desk, &mut fx);
        self.finish(&desk, fx)
    }

    // ---- timers ----

    pub fn poll(&self, now: Millis) -> Vec<Outbound> {
        let mut out = Vec::new();
        for m in self.desks.values() {
            let mut desk = m.lock().unwrap();
            let mut fx = Effects::new(now);
            self.expire_probes(&mut desk, &mut fx);
            let expired: Vec<usize> = desk
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| matches!(&n.status, NodeStatus::Occupied(s) if now >= s.expires_at + self.settings.expiry_grace_ms))
                .map(|(i, _)| i)
                .collect();
            for i in expired {
                self.release(&mut desk, i, EndReason::Timeout, None, &mut fx);
            }
            for e in desk.queue.expire(now, self.settings.queue_idle_ms) {
                fx.touched_users.push(e.user.clone());
                fx.events.push(EventKind::Dequeued {
                    user: e.user,
                    token: e.token,
                    why: "expired".into(),
                });
            }
            let holders = desk.calendar.activate(now);
            if !holders.is_empty() {
                desk.queue.promote(&holders);
                for user in holders {
                    fx.events.push(EventKind::ReservationActive { user });
                }
            }
            self.dispatch(&mut desk, &mut fx);
            out.extend(self.finish(&desk, fx));
        }
        out
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        let mut due: Option<Millis> = None;
        let mut push = |t: Millis| due = Some(due.map_or(t, |d| d.min(t)));
        for m in self.desks.values() {
            let desk = m.lock().unwrap();
            for n in &desk.nodes {
                match &n.status {
                    NodeStatus::Probing(p) => push(p.deadline),
                    NodeStatus::Occupied(s) => push(s.expires_at + self.settings.expiry_grace_ms),
                    _ => {}
                }
            }
            if let Some(t) = desk.queue.next_expiry(self.settings.queue_idle_ms) {
                push(t);
            }
            if let Some(t) = desk.calendar.next_boundary() {
                push(t);
            }
        }
        due
    }

    // ---- internals ----

    fn expire_probes(&self, desk: &mut Desk, fx: &mut Effects) {
        let now = fx.now;
        let late: Vec<usize> = desk
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(&n.status, NodeStatus::Probing(p) if now >= p.deadline))
            .map(|(i, _)| i)
            .collect();
        for i in late {
            self.fail_probe(desk, i, Leg::Stream, fx);
            desk.nodes[i].status = NodeStatus::Offline;
        }
    }

    /// Withdraws a probe; the user returns to their place in the queue.
    fn fail_probe(&self, desk: &mut Desk, i: usize, reason: Leg, fx: &mut Effects) {
        let node = &mut desk.nodes[i];
        let NodeStatus::Probing(p) = std::mem::replace(&mut node.status, NodeStatus::Vacant) else {
            return;
        };
        node.session_end_to_all(&p.session_id, EndReason::Cancelled, None, &mut fx.out);
        fx.events.push(EventKind::ProbeFailed {
            node_id: node.node_id.clone(),
            session_id: p.session_id,
            user: p.entry.user.clone(),
            reason,
        });
        desk.queue.requeue(p.entry);
    }

    fn on_ack(&self, desk: &mut Desk, i: usize, device_id: &str, session_id: String, fx: &mut Effects) {
        let now = fx.now;
        let duration = self.settings.session_duration_s * SECOND;
        let node = &mut desk.nodes[i];
        match &mut node.status {
            NodeStatus::Probing(p) if p.session_id == session_id => {
                p.acked.insert(device_id.to_string());
                if p.acked.len() < node.devices.len() {
                    return;
                }
                let p = p.clone();
                let latency = now - p.started_at;
                node.last_ack_latency_ms = Some(latency);
                node.status = NodeStatus::Occupied(SessionRecord {
                    session_id: p.session_id.clone(),
                    user: p.entry.user.clone(),
                    node_id: node.node_id.clone(),
                    started_at: now,
                    expires_at: now + duration,
                    user_peer_id: p.entry.peer_id.clone(),
                });
                let _ = self.cloud.update_pin(&node.control().token, pins::FLAG, pins::FLAG_OCCUPIED);
                fx.events.push(EventKind::Granted {
                    node_id: node.node_id.clone(),
                    session_id: p.session_id,
                    user: p.entry.user.clone(),
                    token: p.entry.token,
                    ack_latency_ms: latency,
                });
                desk.notices.remove(&p.entry.user);
            }
            NodeStatus::Occupied(s) if s.session_id == session_id => {}
            _ => fx.out.push(Outbound {
                device_id: device_id.to_string(),
                msg: ChannelMessage::SessionEnd {
                    session_id,
                    reason: EndReason::Cancelled,
                },
            }),
        }
    }

    /// Ends the session on node `i` and marks the node vacant.
    fn release(&self, desk: &mut Desk, i: usize, reason: EndReason, reported_by: Option<&str>, fx: &mut Effects) {
        let node = &mut desk.nodes[i];
        let NodeStatus::Occupied(s) = std::mem::replace(&mut node.status, NodeStatus::Vacant) else {
            return;
        };
        node.session_end_to_all(&s.session_id, reason, reported_by, &mut fx.out);
        let _ = self.cloud.update_pin(&node.control().token, pins::FLAG, pins::FLAG_VACANT);
        fx.events.push(EventKind::SessionEnded {
            node_id: node.node_id.clone(),
            session_id: s.session_id,
            user: s.user.clone(),
            reason,
        });
        fx.touched_users.push(s.user);
    }

    /// Offers free nodes to the head of the queue, lowest node id first.
    fn dispatch(&self, desk: &mut Desk, fx: &mut Effects) {
        while !desk.queue.is_empty() {
            let free = desk
                .nodes
                .iter()
                .position(|n| n.status == NodeStatus::Vacant && self.legs(n) == Availability::Available);
            let Some(i) = free else { break };
            let entry = desk.queue.pop_front().expect("non-empty queue");
            let session_id = format!("s-{}", self.next_session.fetch_add(1, Ordering::Relaxed) + 1);
            let node = &mut desk.nodes[i];
            for d in &node.devices {
                fx.out.push(Outbound {
                    device_id: d.device_id.clone(),
                    msg: ChannelMessage::SessionStart {
                        session_id: session_id.clone(),
                        user_peer_id: entry.peer_id.clone(),
                        duration_s: self.settings.session_duration_s,
                    },
                });
            }
            fx.events.push(EventKind::ProbeStarted {
                node_id: node.node_id.clone(),
                session_id: session_id.clone(),
                user: entry.user.clone(),
                token: entry.token,
            });
            node.status = NodeStatus::Probing(Probe {
                session_id,
                entry,
                started_at: fx.now,
                deadline: fx.now + self.settings.ack_timeout_ms,
                acked: BTreeSet::new(),
            });
        }
        if !desk.queue.is_empty() && !self.has_capacity(desk) {
            while let Some(e) = desk.queue.pop_front() {
                desk.notices.insert(e.user.clone(), EntryStatus::Offline);
                fx.touched_users.push(e.user.clone());
                fx.events.push(EventKind::Dequeued {
                    user: e.user,
                    token: e.token,
                    why: "offline".into(),
                });
            }
        }
    }

    /// Releases claims of users no longer involved and records events.
    fn finish(&self, desk: &Desk, fx: Effects) -> Vec<Outbound> {
        if !fx.touched_users.is_empty() {
            let mut claims = self.claims.lock().unwrap();
            for u in &fx.touched_users {
                if claims.get(u) == Some(&desk.id) && !desk.involves(u) {
                    claims.remove(u);
                }
            }
        }
        self.log(&desk.id, fx.now, fx.events);
        fx.out
    }

    fn log(&self, exp_id: &str, now: Millis, kinds: Vec<EventKind>) {
        if kinds.is_empty() {
            return;
        }
        let mut events = self.events.lock().unwrap();
        for kind in kinds {
            let ev = OrchEvent {
                ts: now,
                experiment_id: exp_id.to_string(),
                kind,
            };
            tracing::debug!(target: "orchestrator", event = ?ev.kind, "event");
            if let Some(f) = &self.session_log {
                let line = serde_json::to_string(&ev).expect("events serialize");
                if let Err(e) = writeln!(f.lock().unwrap(), "{line}") {
                    tracing::warn!("session log write failed: {e}");
                }
            }
            events.push(ev);
        }
    }
}

#[cfg(test)]
mod tests;
