//! Deterministic discrete-event world: one pin cloud, one signaling broker,
//! one orchestrator and an agent per configured device, all driven by a
//! shared virtual clock.
//!
//! Device channel messages travel with a fixed latency. User-side calls go
//! straight to the orchestrator, standing in for the HTTP API.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{new_rig, Agent, AgentEvent, FaultFlags, Phase, Rig};
use crate::clock::{Clock, Millis, VirtualClock};
use crate::cloud::{pins, CloudApi, PinStore};
use crate::config::{ConfigError, PlatformConfig};
use crate::orchestrator::{ApiError, EntryStatus, EventKind, Orchestrator, Outbound, OutputSnapshot};
use crate::physics::ExperimentState;
use crate::protocol::ChannelMessage;
use crate::signaling::{Broker, DeliveredFrame, InboxItem, MediaApi, SignalError};

pub const CHANNEL_LATENCY_MS: Millis = 10;
/// Guard against a component that keeps asking to run at the same instant.
const MAX_ROUNDS_PER_INSTANT: usize = 10_000;

/// One observable step, in the order it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub ts: Millis,
    pub actor: String,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone)]
enum Pending {
    Connect { device: String },
    ToServer { device: String, epoch: u64, msg: ChannelMessage },
    ToDevice { device: String, epoch: u64, msg: ChannelMessage },
}

struct Slot {
    agent: Agent,
    exp_id: String,
    node_id: String,
    /// Bumped on every (re)connection; messages from older links are dropped.
    epoch: u64,
    connected: bool,
    /// Link held down until explicitly restored.
    held_down: bool,
    reconnect_scheduled: bool,
}

pub struct World {
    cfg: PlatformConfig,
    clock: VirtualClock,
    store: Arc<PinStore>,
    broker: Arc<Broker>,
    orch: Arc<Orchestrator>,
    slots: BTreeMap<String, Slot>,
    rigs: BTreeMap<String, Rig>,
    pending: BTreeMap<(Millis, u64), Pending>,
    seq: u64,
    trace: Vec<TraceEntry>,
    orch_events_seen: usize,
    user_tokens: HashMap<String, String>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("now", &self.clock.now_ms())
            .field("devices", &self.slots.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl World {
    /// Builds the world and schedules every agent to connect at `start_ms`.
    pub fn new(cfg: PlatformConfig, start_ms: Millis) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let clock = VirtualClock::starting_at(start_ms);
        let store = Arc::new(PinStore::new(Arc::new(clock.clone())));
        let broker = Arc::new(Broker::new(cfg.latency_profiles.clone()));
        let orch = Arc::new(Orchestrator::new(&cfg, store.clone()));
        let mut slots = BTreeMap::new();
        let mut rigs = BTreeMap::new();
        for exp in &cfg.experiments {
            for node in &exp.nodes {
                let rig = new_rig(exp.initial_state());
                rigs.insert(node.node_id.clone(), rig.clone());
                for dev in &node.devices {
                    store.register_device(&dev.token);
                }
                for dev in &node.devices {
                    let agent = Agent::new(
                        cfg.agent_config(exp, node, dev),
                        rig.clone(),
                        store.clone(),
                        broker.clone(),
                        start_ms,
                    );
                    slots.insert(
                        dev.device_id.clone(),
                        Slot {
                            agent,
                            exp_id: exp.id.clone(),
                            node_id: node.node_id.clone(),
                            epoch: 0,
                            connected: false,
                            held_down: false,
                            reconnect_scheduled: true,
                        },
                    );
                }
            }
        }
        let mut world = Self {
            cfg,
            clock,
            store,
            broker,
            orch,
            slots,
            rigs,
            pending: BTreeMap::new(),
            seq: 0,
            trace: Vec::new(),
            orch_events_seen: 0,
            user_tokens: HashMap::new(),
        };
        let devices: Vec<String> = world.slots.keys().cloned().collect();
        for device in devices {
            world.schedule(start_ms, Pending::Connect { device });
        }
        Ok(world)
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.cfg
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn store(&self) -> &Arc<PinStore> {
        &self.store
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orch
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn agent(&self, device_id: &str) -> Option<&Agent> {
        self.slots.get(device_id).map(|s| &s.agent)
    }

    pub fn rig(&self, node_id: &str) -> Option<ExperimentState> {
        self.rigs.get(node_id).map(|r| r.lock().unwrap().clone())
    }

    /// True once every agent has authorized and sits idle or in a session.
    pub fn all_agents_ready(&self) -> bool {
        self.slots
            .values()
            .all(|s| matches!(s.agent.phase(), Phase::Idle | Phase::InSession))
    }

    fn schedule(&mut self, at: Millis, p: Pending) {
        self.seq += 1;
        self.pending.insert((at, self.seq), p);
    }

    fn record(&mut self, actor: impl Into<String>, event: impl Into<String>, session_id: Option<String>, detail: serde_json::Value) {
        self.trace.push(TraceEntry {
            ts: self.now(),
            actor: actor.into(),
            event: event.into(),
            session_id,
            detail,
        });
    }

    fn next_due(&self) -> Option<Millis> {
        let candidates = [
            self.pending.keys().next().map(|k| k.0),
            self.slots.values().filter_map(|s| s.agent.next_deadline()).min(),
            self.orch.next_deadline(),
            self.broker.next_due(),
        ];
        candidates.into_iter().flatten().min()
    }

    /// Runs every event up to and including `t`, then parks the clock at `t`.
    pub fn run_until(&mut self, t: Millis) {
        let mut rounds = 0;
        let mut last = self.now();
        while let Some(due) = self.next_due().filter(|d| *d <= t) {
            let at = due.max(self.now());
            if at == last {
                rounds += 1;
                assert!(rounds < MAX_ROUNDS_PER_INSTANT, "simulation stuck at t={at}");
            } else {
                rounds = 0;
                last = at;
            }
            self.clock.advance_to(at);
            self.step();
        }
        self.clock.advance_to(t);
    }

    pub fn advance(&mut self, ms: Millis) {
        let t = self.now() + ms;
        self.run_until(t);
    }

    /// Runs until `pred` holds or `limit_ms` elapses; returns whether it held.
    pub fn run_until_pred(&mut self, limit_ms: Millis, step_ms: Millis, mut pred: impl FnMut(&World) -> bool) -> bool {
        let end = self.now() + limit_ms;
        while self.now() < end {
            if pred(self) {
                return true;
            }
            self.run_until((self.now() + step_ms.max(1)).min(end));
        }
        pred(self)
    }

    fn step(&mut self) {
        let now = self.now();
        while let Some((&key, _)) = self.pending.iter().next() {
            if key.0 > now {
                break;
            }
            let p = self.pending.remove(&key).expect("present");
            self.handle(p);
        }
        let due: Vec<String> = self
            .slots
            .iter()
            .filter(|(_, s)| s.agent.next_deadline().is_some_and(|d| d <= now))
            .map(|(k, _)| k.clone())
            .collect();
        for device in due {
            let slot = self.slots.get_mut(&device).expect("slot");
            let msgs = slot.agent.poll(now);
            self.send_from_device(&device, msgs);
        }
        self.collect_agent_events();
        let out = self.orch.poll(now);
        self.route(out);
        self.broker.pump(now);
        self.collect_orch_events();
    }

    fn handle(&mut self, p: Pending) {
        let now = self.now();
        match p {
            Pending::Connect { device } => {
                let slot = self.slots.get_mut(&device).expect("slot");
                slot.reconnect_scheduled = false;
                if slot.held_down || !slot.agent.can_reconnect() {
                    return;
                }
                slot.epoch += 1;
                slot.connected = true;
                let auth = slot.agent.connect(now);
                self.record(format!("device:{device}"), "connect", None, serde_json::Value::Null);
                self.send_from_device(&device, vec![auth]);
            }
            Pending::ToServer { device, epoch, msg } => {
                let slot = &self.slots[&device];
                if slot.epoch != epoch || !slot.connected {
                    return;
                }
                let exp_id = slot.exp_id.clone();
                self.record(format!("device:{device}"), msg.type_name(), session_of(&msg), detail_of(&msg));
                match msg {
                    ChannelMessage::Auth {
                        experiment_id,
                        device_id,
                        secret,
                    } => {
                        let reply = if experiment_id != exp_id {
                            Err("wrong experiment".to_string())
                        } else {
                            self.orch.authorize_device(&experiment_id, &device_id, &secret, now)
                        };
                        match reply {
                            Ok((room, out)) => {
                                self.deliver_to(&device, ChannelMessage::AuthOk { room });
                                self.route(out);
                            }
                            Err(reason) => self.deliver_to(&device, ChannelMessage::AuthFail { reason }),
                        }
                    }
                    other => {
                        let out = self.orch.device_message(&device, other, now);
                        self.route(out);
                    }
                }
            }
            Pending::ToDevice { device, epoch, msg } => {
                let slot = self.slots.get_mut(&device).expect("slot");
                if slot.epoch != epoch || !slot.connected {
                    return;
                }
                let rejected = matches!(msg, ChannelMessage::AuthFail { .. });
                let replies = slot.agent.on_message(msg.clone(), now);
                if rejected {
                    slot.connected = false;
                }
                self.record("server", msg.type_name(), session_of(&msg), json!({ "to": device }));
                self.send_from_device(&device, replies);
            }
        }
    }

    fn send_from_device(&mut self, device: &str, msgs: Vec<ChannelMessage>) {
        let slot = &self.slots[device];
        if !slot.connected {
            return;
        }
        let epoch = slot.epoch;
        let at = self.now() + CHANNEL_LATENCY_MS;
        for msg in msgs {
            self.schedule(
                at,
                Pending::ToServer {
                    device: device.to_string(),
                    epoch,
                    msg,
                },
            );
        }
    }

    fn deliver_to(&mut self, device: &str, msg: ChannelMessage) {
        let Some(slot) = self.slots.get(device) else {
            return;
        };
        if !slot.connected {
            return;
        }
        let epoch = slot.epoch;
        let at = self.now() + CHANNEL_LATENCY_MS;
        self.schedule(
            at,
            Pending::ToDevice {
                device: device.to_string(),
                epoch,
                msg,
            },
        );
    }

    fn route(&mut self, out: Vec<Outbound>) {
        for o in out {
            self.deliver_to(&o.device_id, o.msg);
        }
    }

    fn collect_agent_events(&mut self) {
        let mut batch = Vec::new();
        for (device, slot) in self.slots.iter_mut() {
            for (ts, ev) in slot.agent.drain_events() {
                batch.push((ts, device.clone(), ev));
            }
        }
        batch.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (ts, device, ev) in batch {
            let (name, session) = match &ev {
                AgentEvent::CallPlaced { session_id, .. } => ("call", Some(session_id.clone())),
                AgentEvent::CallFailed { session_id, .. } => ("call_failed", Some(session_id.clone())),
                AgentEvent::HungUp { session_id, .. } => ("hangup", Some(session_id.clone())),
                AgentEvent::CommandStarted { .. } => ("command_started", None),
                AgentEvent::CommandDone { .. } => ("command_done", None),
                AgentEvent::Recalibrated { .. } => ("recalibrated", None),
                AgentEvent::Fault { .. } => ("fault", None),
            };
            let detail = match &ev {
                AgentEvent::CommandDone { .. } => serde_json::Value::Null,
                other => serde_json::to_value(other).unwrap_or_default(),
            };
            self.trace.push(TraceEntry {
                ts,
                actor: format!("device:{device}"),
                event: name.to_string(),
                session_id: session,
                detail,
            });
        }
    }

    fn collect_orch_events(&mut self) {
        let events = self.orch.events_since(self.orch_events_seen);
        self.orch_events_seen += events.len();
        for ev in events {
            let value = serde_json::to_value(&ev.kind).unwrap_or_default();
            let name = value.get("event").and_then(|v| v.as_str()).unwrap_or("event").to_string();
            let session = value.get("session_id").and_then(|v| v.as_str()).map(str::to_string);
            let flag_node = match &ev.kind {
                EventKind::SessionEnded { node_id, .. } | EventKind::Granted { node_id, .. } => Some(node_id.clone()),
                _ => None,
            };
            self.trace.push(TraceEntry {
                ts: ev.ts,
                actor: "orchestrator".into(),
                event: name,
                session_id: session.clone(),
                detail: value,
            });
            if let Some(node_id) = flag_node {
                let flag = self.control_token(&node_id).and_then(|t| self.store.get_pin(&t, pins::FLAG).ok().flatten());
                self.trace.push(TraceEntry {
                    ts: ev.ts,
                    actor: "cloud".into(),
                    event: "flag".into(),
                    session_id: session,
                    detail: json!({ "node_id": node_id, "value": flag }),
                });
            }
        }
    }

    fn control_token(&self, node_id: &str) -> Option<String> {
        self.cfg
            .experiments
            .iter()
            .flat_map(|e| &e.nodes)
            .find(|n| n.node_id == node_id)
            .and_then(|n| n.control())
            .map(|d| d.token.clone())
    }

    // ---- fault injection ----

    pub fn set_faults(&mut self, device_id: &str, faults: FaultFlags) -> bool {
        let Some(slot) = self.slots.get_mut(device_id) else {
            return false;
        };
        slot.agent.set_faults(faults);
        let now = self.now();
        self.record(format!("device:{device_id}"), "faults", None, serde_json::to_value(faults).unwrap_or_default());
        let _ = now;
        true
    }

    /// Re-homes the rig as a power cycle would, surfacing homing faults.
    pub fn power_cycle(&mut self, device_id: &str) -> bool {
        let now = self.now();
        let Some(slot) = self.slots.get_mut(device_id) else {
            return false;
        };
        let _ = slot.agent.recalibrate(now);
        self.collect_agent_events();
        true
    }

    pub fn with_rig(&mut self, node_id: &str, f: impl FnOnce(&mut ExperimentState)) -> bool {
        match self.rigs.get(node_id) {
            Some(r) => {
                f(&mut r.lock().unwrap());
                true
            }
            None => false,
        }
    }

    /// Cuts a device's channel. It reconnects after `down_for_ms` (never
    /// sooner than its own backoff), or stays down until [`World::restore_link`]
    /// when `None`.
    pub fn drop_link(&mut self, device_id: &str, down_for_ms: Option<Millis>) -> bool {
        let now = self.now();
        let Some(slot) = self.slots.get_mut(device_id) else {
            return false;
        };
        slot.connected = false;
        slot.epoch += 1;
        slot.agent.on_disconnect(now);
        let delay = slot.agent.reconnect_delay();
        slot.held_down = down_for_ms.is_none();
        let reconnect = down_for_ms.map(|d| now + d.max(delay));
        if reconnect.is_some() {
            slot.reconnect_scheduled = true;
        }
        self.record(format!("device:{device_id}"), "link_down", None, serde_json::Value::Null);
        let out = self.orch.device_disconnected(device_id, now);
        self.route(out);
        if let Some(at) = reconnect {
            self.schedule(
                at,
                Pending::Connect {
                    device: device_id.to_string(),
                },
            );
        }
        self.collect_agent_events();
        self.collect_orch_events();
        true
    }

    pub fn restore_link(&mut self, device_id: &str) -> bool {
        let now = self.now();
        let Some(slot) = self.slots.get_mut(device_id) else {
            return false;
        };
        slot.held_down = false;
        if !slot.connected && !slot.reconnect_scheduled {
            slot.reconnect_scheduled = true;
            self.schedule(
                now,
                Pending::Connect {
                    device: device_id.to_string(),
                },
            );
        }
        true
    }

    // ---- user side ----

    pub fn login(&mut self, user: &str, secret: &str) -> Result<String, ApiError> {
        let r = self.orch.login(user, secret);
        self.record(format!("user:{user}"), "login", None, json!({ "ok": r.is_ok() }));
        if let Ok(t) = &r {
            self.user_tokens.insert(t.clone(), user.to_string());
        }
        r
    }

    fn user_of(&self, token: &str) -> Result<String, ApiError> {
        self.orch.authenticate(token)
    }

    pub fn register_peer(&mut self, peer_id: &str) -> Result<(), SignalError> {
        let now = self.now();
        self.broker.register(peer_id, now)
    }

    pub fn unregister_peer(&mut self, peer_id: &str) {
        let now = self.now();
        self.broker.unregister(peer_id, now);
    }

    pub fn enter(&mut self, token: &str, exp_id: &str, peer_id: &str) -> Result<EntryStatus, ApiError> {
        let user = self.user_of(token)?;
        let now = self.now();
        let r = self.orch.enter(&user, exp_id, peer_id, now);
        let detail = match &r {
            Ok((s, _)) => s.to_json(),
            Err(e) => json!({ "error": e.kind() }),
        };
        self.record(format!("user:{user}"), "enter", None, detail);
        let (status, out) = r?;
        self.route(out);
        self.collect_orch_events();
        Ok(status)
    }

    pub fn status(&mut self, token: &str, exp_id: &str) -> Result<EntryStatus, ApiError> {
        let user = self.user_of(token)?;
        self.orch.status(&user, exp_id, self.now())
    }

    pub fn input(&mut self, token: &str, exp_id: &str, params: &serde_json::Value) -> Result<(), ApiError> {
        let user = self.user_of(token)?;
        let now = self.now();
        let r = self.orch.submit_input(&user, exp_id, params, now);
        self.record(format!("user:{user}"), "input", None, json!({ "params": params, "ok": r.is_ok() }));
        let out = r?;
        self.route(out);
        self.collect_orch_events();
        Ok(())
    }

    pub fn output(&mut self, token: &str, exp_id: &str) -> Result<OutputSnapshot, ApiError> {
        let user = self.user_of(token)?;
        self.orch.output(&user, exp_id)
    }

    pub fn leave(&mut self, token: &str, exp_id: &str) -> Result<(), ApiError> {
        let user = self.user_of(token)?;
        let now = self.now();
        let out = self.orch.leave(&user, exp_id, now)?;
        self.record(format!("user:{user}"), "leave", None, serde_json::Value::Null);
        self.route(out);
        self.collect_orch_events();
        Ok(())
    }

    pub fn logout(&mut self, token: &str) {
        self.orch.logout(token);
        self.user_tokens.remove(token);
    }

    /// Frames delivered to `peer_id` since the last call.
    pub fn take_frames(&mut self, peer_id: &str) -> Vec<DeliveredFrame> {
        self.broker
            .take_inbox(peer_id)
            .into_iter()
            .filter_map(|i| match i {
                InboxItem::Frame(f) => Some(f),
                InboxItem::Hangup { .. } => None,
            })
            .collect()
    }

    /// Node id a device is mounted on.
    pub fn node_of(&self, device_id: &str) -> Option<&str> {
        self.slots.get(device_id).map(|s| s.node_id.as_str())
    }
}

fn session_of(msg: &ChannelMessage) -> Option<String> {
    match msg {
        ChannelMessage::SessionStart { session_id, .. }
        | ChannelMessage::Ack { session_id }
        | ChannelMessage::SessionEnd { session_id, .. }
        | ChannelMessage::Input { session_id, .. } => Some(session_id.clone()),
        _ => None,
    }
}

fn detail_of(msg: &ChannelMessage) -> serde_json::Value {
    match msg {
        ChannelMessage::Auth { device_id, .. } => json!({ "device_id": device_id }),
        ChannelMessage::SessionEnd { reason, .. } => json!({ "reason": reason }),
        ChannelMessage::Error { code, .. } => json!({ "code": code }),
        _ => serde_json::Value::Null,
    }
}

/// Ordered milestones of one session as seen in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheck {
    pub session_id: String,
    pub node_id: String,
    pub probe_started_at: Millis,
    pub ack_latency_ms: Millis,
    pub milestones: Vec<String>,
}

fn find_from(trace: &[TraceEntry], from: usize, pred: impl Fn(&TraceEntry) -> bool) -> Option<usize> {
    trace.iter().enumerate().skip(from).find(|(_, e)| pred(e)).map(|(i, _)| i)
}

/// Checks that session `session_id` followed the full entry protocol:
/// device AUTH and AUTH_OK, SESSION_START, ACK within the window, grant,
/// media call, inputs, SESSION_END and finally a vacant flag.
pub fn check_session_flow(trace: &[TraceEntry], session_id: &str, ack_window_ms: Millis) -> Result<FlowCheck, String> {
    let is = |e: &TraceEntry, actor_prefix: &str, event: &str| e.actor.starts_with(actor_prefix) && e.event == event;
    let in_session = |e: &TraceEntry| e.session_id.as_deref() == Some(session_id);

    let probe = find_from(trace, 0, |e| is(e, "orchestrator", "probe_started") && in_session(e))
        .ok_or_else(|| format!("no probe for {session_id}"))?;
    let node_id = trace[probe].detail["node_id"].as_str().unwrap_or_default().to_string();
    let node_devices: Vec<String> = trace
        .iter()
        .filter(|e| is(e, "orchestrator", "device_authorized") && e.detail["node_id"] == node_id.as_str())
        .filter_map(|e| e.detail["device_id"].as_str().map(str::to_string))
        .collect();
    if node_devices.is_empty() {
        return Err(format!("no device of {node_id} authorized"));
    }
    let mut milestones = Vec::new();
    for dev in node_devices.iter().collect::<std::collections::BTreeSet<_>>() {
        let actor = format!("device:{dev}");
        let auth = find_from(trace, 0, |e| e.actor == actor && e.event == "AUTH")
            .ok_or_else(|| format!("{dev} never sent AUTH"))?;
        let ok = find_from(trace, auth, |e| e.actor == "server" && e.event == "AUTH_OK" && e.detail["to"] == dev.as_str())
            .ok_or_else(|| format!("{dev} never got AUTH_OK"))?;
        if ok > probe {
            return Err(format!("{dev} joined its room after the probe"));
        }
    }
    milestones.push("auth".to_string());
    milestones.push("room".to_string());
    let start = find_from(trace, probe, |e| e.actor == "server" && e.event == "SESSION_START" && in_session(e))
        .ok_or("SESSION_START never delivered")?;
    milestones.push("session_start".into());
    let mut last_ack = start;
    for dev in &node_devices {
        let actor = format!("device:{dev}");
        let ack = find_from(trace, start, |e| e.actor == actor && e.event == "ACK" && in_session(e))
            .ok_or_else(|| format!("{dev} never acknowledged"))?;
        last_ack = last_ack.max(ack);
    }
    milestones.push("ack".into());
    let granted = find_from(trace, last_ack, |e| is(e, "orchestrator", "granted") && in_session(e))
        .ok_or("no grant after the ACKs")?;
    let latency = trace[granted].ts - trace[probe].ts;
    if latency >= ack_window_ms {
        return Err(format!("ACK took {latency} ms"));
    }
    milestones.push("granted".into());
    let call = find_from(trace, start, |e| e.event == "call" && in_session(e)).ok_or("no media call placed")?;
    if call < start {
        return Err("call before SESSION_START".into());
    }
    milestones.push("call".into());
    let inputs: Vec<usize> = trace
        .iter()
        .enumerate()
        .filter(|(_, e)| e.actor == "server" && e.event == "INPUT" && in_session(e))
        .map(|(i, _)| i)
        .collect();
    if inputs.iter().any(|&i| i < granted) {
        return Err("input relayed before the grant".into());
    }
    if !inputs.is_empty() {
        milestones.push("inputs".into());
    }
    let after_inputs = inputs.last().copied().unwrap_or(granted);
    let end = find_from(trace, after_inputs, |e| e.event == "SESSION_END" && in_session(e)).ok_or("no SESSION_END")?;
    milestones.push("session_end".into());
    let ended = find_from(trace, granted, |e| is(e, "orchestrator", "session_ended") && in_session(e))
        .ok_or("orchestrator never ended the session")?;
    let flag = find_from(trace, ended, |e| e.actor == "cloud" && e.event == "flag" && in_session(e))
        .ok_or("flag not observed after release")?;
    if trace[flag].detail["value"] != pins::FLAG_VACANT {
        return Err(format!("flag after release is {}", trace[flag].detail["value"]));
    }
    if ended < end && trace[end].actor != "server" {
        // the device reported the end; the release must follow it
        return Err("release recorded before the device's SESSION_END".into());
    }
    milestones.push("vacant".into());
    Ok(FlowCheck {
        session_id: session_id.to_string(),
        node_id,
        probe_started_at: trace[probe].ts,
        ack_latency_ms: latency,
        milestones,
    })
}

/// Checks that an unanswered probe marked its node offline exactly
/// `ack_window_ms` after SESSION_START went out. Returns the node id.
pub fn check_probe_timeout(trace: &[TraceEntry], session_id: &str, ack_window_ms: Millis) -> Result<String, String> {
    let in_session = |e: &TraceEntry| e.session_id.as_deref() == Some(session_id);
    let probe = trace
        .iter()
        .find(|e| e.actor == "orchestrator" && e.event == "probe_started" && in_session(e))
        .ok_or("no probe")?;
    let failed = trace
        .iter()
        .find(|e| e.actor == "orchestrator" && e.event == "probe_failed" && in_session(e))
        .ok_or("probe never failed")?;
    if trace.iter().any(|e| e.actor == "orchestrator" && e.event == "granted" && in_session(e)) {
        return Err("session was granted".into());
    }
    if failed.detail["reason"] != "stream" {
        return Err(format!("failure reason {}", failed.detail["reason"]));
    }
    let waited = failed.ts - probe.ts;
    if waited != ack_window_ms {
        return Err(format!("node marked unavailable after {waited} ms"));
    }
    Ok(probe.detail["node_id"].as_str().unwrap_or_default().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{Availability, Leg, ACK_TIMEOUT_MS};

    fn world(fl: usize, vr: usize) -> World {
        let mut w = World::new(PlatformConfig::fleet(fl, vr), 1_700_000_000_000).unwrap();
        w.advance(100);
        assert!(w.all_agents_ready());
        w
    }

    #[test]
    fn agents_authorize_and_idle() {
        let w = world(1, 1);
        let nodes = w.orchestrator().nodes("FL").unwrap();
        assert_eq!(nodes[0].devices_connected, 2);
        assert_eq!(w.orchestrator().check_availability("VR", "vr-1").unwrap(), Availability::Available);
    }

    #[test]
    fn full_session_flow_passes_checker() {
        let mut w = world(1, 0);
        let tok = w.login("student1", "pass1").unwrap();
        w.register_peer("peer-1").unwrap();
        w.enter(&tok, "FL", "peer-1").unwrap();
        w.advance(100);
        let EntryStatus::Granted { session_id, .. } = w.status(&tok, "FL").unwrap() else {
            panic!("not granted");
        };
        w.input(&tok, "FL", &json!({"target": "screen", "steps": 500})).unwrap();
        w.advance(2_000);
        let out = w.output(&tok, "FL").unwrap();
        assert_eq!(out.pins["V1"], json!(20.5));
        assert!(!w.take_frames("peer-1").is_empty());
        w.leave(&tok, "FL").unwrap();
        w.advance(100);
        let flow = check_session_flow(w.trace(), &session_id, ACK_TIMEOUT_MS).unwrap();
        assert_eq!(
            flow.milestones,
            ["auth", "room", "session_start", "ack", "granted", "call", "inputs", "session_end", "vacant"]
        );
        assert_eq!(flow.ack_latency_ms, 2 * CHANNEL_LATENCY_MS);
    }

    #[test]
    fn timed_out_session_ends_by_device_and_frees_node() {
        let mut cfg = PlatformConfig::fleet(1, 0);
        cfg.session_duration_s = 10;
        let mut w = World::new(cfg, 0).unwrap();
        w.advance(100);
        let a = w.login("student1", "pass1").unwrap();
        let b = w.login("student2", "pass2").unwrap();
        w.register_peer("pa").unwrap();
        w.register_peer("pb").unwrap();
        w.enter(&a, "FL", "pa").unwrap();
        w.advance(100);
        assert!(matches!(w.enter(&b, "FL", "pb").unwrap(), EntryStatus::Queued { position: 1, .. }));
        w.advance(10_000);
        assert_eq!(w.status(&a, "FL").unwrap(), EntryStatus::Idle);
        assert!(matches!(w.status(&b, "FL").unwrap(), EntryStatus::Granted { .. }));
        let end = w
            .trace()
            .iter()
            .find(|e| e.event == "session_ended")
            .unwrap();
        assert_eq!(end.detail["reason"], "timeout");
    }

    #[test]
    fn busy_agent_marks_node_offline_at_ack_deadline() {
        let mut w = world(1, 0);
        w.set_faults("fl-1-side", FaultFlags { busy_no_ack: true, ..Default::default() });
        let tok = w.login("student1", "pass1").unwrap();
        w.register_peer("p").unwrap();
        let EntryStatus::Pending { session_id, .. } = w.enter(&tok, "FL", "p").unwrap() else {
            panic!("expected a pending entry");
        };
        w.advance(10_000);
        assert_eq!(check_probe_timeout(w.trace(), &session_id, ACK_TIMEOUT_MS).unwrap(), "fl-1");
        assert_eq!(
            w.orchestrator().check_availability("FL", "fl-1").unwrap(),
            Availability::Unavailable { reason: Leg::Stream }
        );
        assert_eq!(w.status(&tok, "FL").unwrap(), EntryStatus::Offline);
        // the control agent that did acknowledge was told to stand down
        assert_eq!(w.agent("fl-1-ctl").unwrap().phase(), Phase::Idle);
    }

    #[test]
    fn dropped_link_ends_session_and_agent_rejoins() {
        let mut w = world(1, 0);
        let tok = w.login("student1", "pass1").unwrap();
        w.register_peer("p").unwrap();
        w.enter(&tok, "FL", "p").unwrap();
        w.advance(100);
        w.drop_link("fl-1-ctl", Some(1_000));
        assert_eq!(w.status(&tok, "FL").unwrap(), EntryStatus::Idle);
        w.advance(2_000);
        assert!(w.all_agents_ready());
        assert_eq!(w.orchestrator().check_availability("FL", "fl-1").unwrap(), Availability::Available);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let mut w = world(2, 1);
            let t = w.login("student1", "pass1").unwrap();
            w.register_peer("p").unwrap();
            w.enter(&t, "VR", "p").unwrap();
            w.advance(100);
            w.input(&t, "VR", &json!({"direction": "down", "steps": 1024})).unwrap();
            w.advance(5_000);
            serde_json::to_string(w.trace()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
