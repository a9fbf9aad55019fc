//! Simulated hardware node process.
//!
//! An [`Agent`] is a sans-io state machine: drivers feed it channel messages,
//! disconnects and the current time, and forward the [`ChannelMessage`]s it
//! returns to the orchestrator. Cloud pins and media calls go through the
//! [`CloudApi`] and [`MediaApi`] handles it was built with.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{Millis, SECOND};
use crate::cloud::{pins, CloudApi, HEARTBEAT_PERIOD_MS};
use crate::image::{Frame, GrayImage};
use crate::physics::{render_frame, ExperimentKind, ExperimentState, MotorSpec, RenderConfig};
use crate::protocol::{ChannelMessage, Direction, EndReason, ErrorCode, InputParams, Target};
use crate::signaling::MediaApi;

/// Physical state of one node, shared by all agents mounted on it.
pub type Rig = Arc<Mutex<ExperimentState>>;

pub fn new_rig(state: ExperimentState) -> Rig {
    Arc::new(Mutex::new(state))
}

/// Motor driving the lens-bench carriages.
pub const BENCH_MOTOR: MotorSpec = MotorSpec::NEMA17_HALF_STEP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Control,
    StreamOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub camera_id: String,
    pub profile: String,
}

/// Reproducible fault injection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultFlags {
    /// Motor driver unresponsive: commands and homing fail with E01.
    pub motor_driver_fault: bool,
    /// Homing switch never closes: recalibration fails with E02.
    pub stuck_limit_switch: bool,
    /// Fraction of commanded steps the motor actually turns.
    pub motor_stall: Option<f64>,
    /// Cameras return nothing: E10, and entry probes go unanswered.
    pub camera_failure: bool,
    /// No route to the pin cloud: heartbeats stop and E20 goes to the server.
    pub cloud_unreachable: bool,
    /// The agent process is wedged and never acknowledges a session.
    pub busy_no_ack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub experiment_id: String,
    pub node_id: String,
    pub device_id: String,
    pub secret: String,
    pub device_token: String,
    pub role: AgentRole,
    pub cameras: Vec<CameraSpec>,
    pub session_duration_s: u64,
    pub frame_interval_ms: Millis,
    pub home_u_steps: u32,
    pub home_v_steps: u32,
    pub faults: FaultFlags,
    pub seed: u64,
    pub render: RenderConfig,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cameras.is_empty() {
            return Err(format!("agent {} has no camera", self.device_id));
        }
        if self.secret.is_empty() || self.device_id.is_empty() || self.device_token.is_empty() {
            return Err(format!("agent {:?} needs a device id, secret and token", self.device_id));
        }
        Ok(())
    }

    pub fn peer_id(&self, camera: &CameraSpec) -> String {
        format!("{}/{}", self.device_id, camera.camera_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Disconnected,
    Authorizing,
    Idle,
    InSession,
    /// Credentials refused; the agent stops trying.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSession {
    pub session_id: String,
    pub user_peer_id: String,
    pub started_at: Millis,
    pub deadline: Millis,
    pub media: Vec<u64>,
}

/// Things the agent did that are not channel messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AgentEvent {
    CallPlaced { session_id: String, media_session: u64, callee: String },
    CallFailed { session_id: String, detail: String },
    HungUp { session_id: String, reason: EndReason },
    CommandStarted { params: InputParams, done_at: Millis },
    CommandDone { believed: ExperimentState },
    Recalibrated { ok: bool },
    Fault { code: ErrorCode },
}

#[derive(Debug, Clone)]
struct Motion {
    done_at: Millis,
    believed_after: ExperimentState,
    /// Signed steps the motor really turns, per axis (u/v or rod).
    actual: (i64, i64),
}

pub struct Agent {
    cfg: AgentConfig,
    rig: Rig,
    cloud: Arc<dyn CloudApi>,
    media: Arc<dyn MediaApi>,
    phase: Phase,
    believed: ExperimentState,
    session: Option<ActiveSession>,
    pending_end: Option<(String, EndReason)>,
    motion: Option<Motion>,
    commands: VecDeque<InputParams>,
    heartbeats_on: bool,
    next_heartbeat: Millis,
    next_frame: Millis,
    reconnect_attempts: u32,
    peers_registered: bool,
    error: Option<ErrorCode>,
    events: Vec<(Millis, AgentEvent)>,
    frame_cache: HashMap<(usize, u64), Arc<GrayImage>>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("device_id", &self.cfg.device_id)
            .field("phase", &self.phase)
            .field("session", &self.session)
            .field("error", &self.error)
            .finish_non_exhaustive()
    }
}

impl Agent {
    /// Creates the agent and homes the rig, as the node does at power-up.
    pub fn new(cfg: AgentConfig, rig: Rig, cloud: Arc<dyn CloudApi>, media: Arc<dyn MediaApi>, now: Millis) -> Self {
        let believed = rig.lock().unwrap().clone();
        let mut agent = Self {
            cfg,
            rig,
            cloud,
            media,
            phase: Phase::Disconnected,
            believed,
            session: None,
            pending_end: None,
            motion: None,
            commands: VecDeque::new(),
            heartbeats_on: false,
            next_heartbeat: now,
            next_frame: now,
            reconnect_attempts: 0,
            peers_registered: false,
            error: None,
            events: Vec::new(),
            frame_cache: HashMap::new(),
        };
        if agent.cfg.role == AgentRole::Control {
            let _ = agent.recalibrate(now);
        }
        agent
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn device_id(&self) -> &str {
        &self.cfg.device_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn session(&self) -> Option<&ActiveSession> {
        self.session.as_ref()
    }

    pub fn error(&self) -> Option<ErrorCode> {
        self.error
    }

    /// Position the controller believes the actuators are at.
    pub fn believed_state(&self) -> &ExperimentState {
        &self.believed
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn is_moving(&self) -> bool {
        self.motion.is_some()
    }

    pub fn faults(&self) -> FaultFlags {
        self.cfg.faults
    }

    pub fn set_faults(&mut self, faults: FaultFlags) {
        self.cfg.faults = faults;
    }

    pub fn drain_events(&mut self) -> Vec<(Millis, AgentEvent)> {
        std::mem::take(&mut self.events)
    }

    /// Opens the channel handshake.
    pub fn connect(&mut self, _now: Millis) -> ChannelMessage {
        if self.phase != Phase::Rejected {
            self.phase = Phase::Authorizing;
        }
        ChannelMessage::Auth {
            experiment_id: self.cfg.experiment_id.clone(),
            device_id: self.cfg.device_id.clone(),
            secret: self.cfg.secret.clone(),
        }
    }

    pub fn can_reconnect(&self) -> bool {
        self.phase != Phase::Rejected
    }

    /// Backoff before the next connection attempt.
    pub fn reconnect_delay(&self) -> Millis {
        (500u64 << self.reconnect_attempts.min(4)).min(8 * SECOND)
    }

    /// The channel dropped or a connection attempt failed.
    pub fn on_disconnect(&mut self, now: Millis) {
        self.reconnect_attempts = self.reconnect_attempts.saturating_add(1);
        if self.phase != Phase::Rejected {
            self.phase = Phase::Disconnected;
        }
        self.end_session(EndReason::Disconnected, now, true);
    }

    pub fn on_message(&mut self, msg: ChannelMessage, now: Millis) -> Vec<ChannelMessage> {
        let mut out = Vec::new();
        match msg {
            ChannelMessage::AuthOk { .. } => {
                self.phase = Phase::Idle;
                self.reconnect_attempts = 0;
                self.register_peers(now);
                self.heartbeats_on = true;
                self.next_heartbeat = now;
                self.heartbeat(now, &mut out);
                if let Some((session_id, reason)) = self.pending_end.take() {
                    out.push(ChannelMessage::SessionEnd { session_id, reason });
                }
            }
            ChannelMessage::AuthFail { .. } => {
                self.phase = Phase::Rejected;
            }
            ChannelMessage::SessionStart {
                session_id,
                user_peer_id,
                duration_s,
            } => self.on_session_start(session_id, user_peer_id, duration_s, now, &mut out),
            ChannelMessage::SessionEnd { session_id, reason } => {
                if self.session.as_ref().is_some_and(|s| s.session_id == session_id) {
                    self.end_session(reason, now, false);
                }
            }
            ChannelMessage::Input { session_id, params } => {
                let ours = self.session.as_ref().is_some_and(|s| s.session_id == session_id);
                if ours && self.cfg.role == AgentRole::Control {
                    if self.motion.is_some() {
                        self.commands.push_back(params);
                    } else {
                        self.start_command(params, now, &mut out);
                    }
                }
            }
            ChannelMessage::Auth { .. } | ChannelMessage::Ack { .. } | ChannelMessage::Error { .. } => {}
        }
        out
    }

    /// Runs every timer that has come due.
    pub fn poll(&mut self, now: Millis) -> Vec<ChannelMessage> {
        let mut out = Vec::new();
        while let Some(m) = &self.motion {
            if m.done_at > now {
                break;
            }
            self.finish_motion(now);
            if let Some(next) = self.commands.pop_front() {
                self.start_command(next, now, &mut out);
            }
        }
        if self.phase == Phase::InSession && now >= self.next_frame {
            self.publish_frames(now);
            while self.next_frame <= now {
                self.next_frame += self.cfg.frame_interval_ms.max(1);
            }
        }
        if self.session.as_ref().is_some_and(|s| now >= s.deadline) {
            if let Some(msg) = self.end_session(EndReason::Timeout, now, true) {
                out.push(msg);
            }
        }
        if self.heartbeats_on && now >= self.next_heartbeat {
            self.heartbeat(now, &mut out);
        }
        out
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        let mut due = Vec::with_capacity(4);
        if let Some(m) = &self.motion {
            due.push(m.done_at);
        }
        if let Some(s) = &self.session {
            due.push(s.deadline);
            if self.phase == Phase::InSession {
                due.push(self.next_frame);
            }
        }
        if self.heartbeats_on {
            due.push(self.next_heartbeat);
        }
        due.into_iter().min()
    }

    /// Drives to the limit switches and back to the home offsets.
    pub fn recalibrate(&mut self, now: Millis) -> Result<(), ErrorCode> {
        if self.cfg.role != AgentRole::Control {
            return Ok(());
        }
        let fault = if self.cfg.faults.motor_driver_fault {
            Some(ErrorCode::E01)
        } else if self.cfg.faults.stuck_limit_switch {
            Some(ErrorCode::E02)
        } else {
            None
        };
        if let Some(code) = fault {
            self.raise(code, now);
            self.events.push((now, AgentEvent::Recalibrated { ok: false }));
            return Err(code);
        }
        self.motion = None;
        self.commands.clear();
        let homed = {
            let mut rig = self.rig.lock().unwrap();
            match &mut *rig {
                ExperimentState::FocalLength(b) => {
                    b.u_steps = self.cfg.home_u_steps.min(b.max_steps());
                    b.v_steps = self.cfg.home_v_steps.min(b.max_steps());
                }
                ExperimentState::VanishingRod(r) => r.rod_height_steps = 0,
            }
            rig.clone()
        };
        self.believed = homed;
        self.error = None;
        let _ = self.cloud.update_pin(&self.cfg.device_token, pins::ERROR, pins::NO_ERROR);
        self.write_outputs();
        self.events.push((now, AgentEvent::Recalibrated { ok: true }));
        Ok(())
    }

    fn register_peers(&mut self, now: Millis) {
        if self.peers_registered {
            return;
        }
        for cam in &self.cfg.cameras {
            // a conflict means an earlier incarnation of this agent holds it
            let _ = self.media.register(&self.cfg.peer_id(cam), now);
        }
        self.peers_registered = true;
    }

    fn heartbeat(&mut self, now: Millis, out: &mut Vec<ChannelMessage>) {
        while self.next_heartbeat <= now {
            self.next_heartbeat += HEARTBEAT_PERIOD_MS;
        }
        if self.cfg.faults.cloud_unreachable {
            if self.error != Some(ErrorCode::E20) {
                self.error = Some(ErrorCode::E20);
                self.events.push((now, AgentEvent::Fault { code: ErrorCode::E20 }));
                out.push(ChannelMessage::Error {
                    code: ErrorCode::E20,
                    detail: format!("{} cannot reach the pin cloud", self.cfg.device_id),
                });
            }
            return;
        }
        if self.cloud.heartbeat(&self.cfg.device_token).is_err() && self.error != Some(ErrorCode::E20) {
            self.error = Some(ErrorCode::E20);
            out.push(ChannelMessage::Error {
                code: ErrorCode::E20,
                detail: "heartbeat rejected".into(),
            });
        }
    }

    fn raise(&mut self, code: ErrorCode, now: Millis) {
        self.error = Some(code);
        self.events.push((now, AgentEvent::Fault { code }));
        let _ = self.cloud.update_pin(&self.cfg.device_token, pins::ERROR, code.as_str());
    }

    fn on_session_start(
        &mut self,
        session_id: String,
        user_peer_id: String,
        duration_s: u64,
        now: Millis,
        out: &mut Vec<ChannelMessage>,
    ) {
        if self.phase != Phase::Idle || self.cfg.faults.busy_no_ack {
            return;
        }
        if self.cfg.faults.camera_failure {
            self.raise(ErrorCode::E10, now);
            out.push(ChannelMessage::Error {
                code: ErrorCode::E10,
                detail: format!("{} cannot capture", self.cfg.device_id),
            });
            return;
        }
        out.push(ChannelMessage::Ack {
            session_id: session_id.clone(),
        });
        let mut media = Vec::new();
        for cam in &self.cfg.cameras {
            match self.media.call(&self.cfg.peer_id(cam), &user_peer_id, &cam.profile, now) {
                Ok(id) => {
                    media.push(id);
                    self.events.push((
                        now,
                        AgentEvent::CallPlaced {
                            session_id: session_id.clone(),
                            media_session: id,
                            callee: user_peer_id.clone(),
                        },
                    ));
                }
                Err(e) => self.events.push((
                    now,
                    AgentEvent::CallFailed {
                        session_id: session_id.clone(),
                        detail: e.to_string(),
                    },
                )),
            }
        }
        let duration = if duration_s > 0 { duration_s } else { self.cfg.session_duration_s };
        self.session = Some(ActiveSession {
            session_id,
            user_peer_id,
            started_at: now,
            deadline: now + duration * SECOND,
            media,
        });
        self.phase = Phase::InSession;
        self.next_frame = now;
        self.publish_frames(now);
        self.next_frame = now + self.cfg.frame_interval_ms.max(1);
    }

    /// Tears the session down. Returns the SESSION_END to send when `notify`.
    fn end_session(&mut self, reason: EndReason, now: Millis, notify: bool) -> Option<ChannelMessage> {
        let session = self.session.take()?;
        let why = serde_json::to_value(reason)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        for id in &session.media {
            let _ = self.media.hangup(*id, &why, now);
        }
        self.events.push((
            now,
            AgentEvent::HungUp {
                session_id: session.session_id.clone(),
                reason,
            },
        ));
        if self.phase == Phase::InSession {
            self.phase = Phase::Idle;
        }
        if self.cfg.role == AgentRole::Control {
            let _ = self.recalibrate(now);
        }
        if !notify {
            return None;
        }
        if matches!(self.phase, Phase::Idle | Phase::InSession) {
            Some(ChannelMessage::SessionEnd {
                session_id: session.session_id,
                reason,
            })
        } else {
            self.pending_end = Some((session.session_id, reason));
            None
        }
    }

    fn start_command(&mut self, params: InputParams, now: Millis, out: &mut Vec<ChannelMessage>) {
        if params.kind() != self.believed.kind() {
            return;
        }
        if self.cfg.faults.motor_driver_fault {
            self.raise(ErrorCode::E01, now);
            out.push(ChannelMessage::Error {
                code: ErrorCode::E01,
                detail: "motor driver not responding".into(),
            });
            return;
        }
        let clamped;
        let mut after = self.believed.clone();
        let (commanded, motor) = match (&mut after, params) {
            (ExperimentState::FocalLength(b), InputParams::Lens { target, steps }) => {
                let max = b.max_steps() as i64;
                let pos = match target {
                    Target::Object => &mut b.u_steps,
                    Target::Screen => &mut b.v_steps,
                };
                let wanted = *pos as i64 + steps;
                let reached = wanted.clamp(0, max);
                clamped = reached != wanted;
                let delta = reached - *pos as i64;
                *pos = reached as u32;
                let axes = match target {
                    Target::Object => (delta, 0),
                    Target::Screen => (0, delta),
                };
                (axes, BENCH_MOTOR)
            }
            (ExperimentState::VanishingRod(r), InputParams::Rods { direction, steps }) => {
                let signed = match direction {
                    Direction::Down => steps as i64,
                    Direction::Up => -(steps as i64),
                };
                let wanted = r.rod_height_steps as i64 + signed;
                let reached = wanted.clamp(0, r.max_travel_steps as i64);
                clamped = reached != wanted;
                let delta = reached - r.rod_height_steps as i64;
                r.rod_height_steps = reached as u32;
                ((delta, 0), r.motor)
            }
            _ => return,
        };
        if clamped {
            self.raise(ErrorCode::E03, now);
            out.push(ChannelMessage::Error {
                code: ErrorCode::E03,
                detail: "command exceeds travel, clamped".into(),
            });
        }
        let steps = commanded.0.unsigned_abs() + commanded.1.unsigned_abs();
        let done_at = now + motor.move_duration_ms(steps);
        let scale = |d: i64| match self.cfg.faults.motor_stall {
            Some(f) => (d as f64 * f.clamp(0.0, 1.0)).round() as i64,
            None => d,
        };
        self.motion = Some(Motion {
            done_at,
            believed_after: after,
            actual: (scale(commanded.0), scale(commanded.1)),
        });
        self.events.push((now, AgentEvent::CommandStarted { params, done_at }));
    }

    fn finish_motion(&mut self, now: Millis) {
        let Some(m) = self.motion.take() else {
            return;
        };
        {
            let mut rig = self.rig.lock().unwrap();
            let shift = |pos: u32, d: i64, max: u32| (pos as i64 + d).clamp(0, max as i64) as u32;
            match &mut *rig {
                ExperimentState::FocalLength(b) => {
                    let max = b.max_steps();
                    b.u_steps = shift(b.u_steps, m.actual.0, max);
                    b.v_steps = shift(b.v_steps, m.actual.1, max);
                }
                ExperimentState::VanishingRod(r) => {
                    r.rod_height_steps = shift(r.rod_height_steps, m.actual.0, r.max_travel_steps);
                }
            }
        }
        self.believed = m.believed_after;
        self.write_outputs();
        self.events.push((
            now,
            AgentEvent::CommandDone {
                believed: self.believed.clone(),
            },
        ));
    }

    fn write_outputs(&self) {
        let (a, b) = match &self.believed {
            ExperimentState::FocalLength(s) => (format!("{:.3}", s.u_cm()), format!("{:.3}", s.v_cm())),
            ExperimentState::VanishingRod(r) => (format!("{:.4}", r.travel_mm()), format!("{:.4}", r.submerged_fraction())),
        };
        let token = &self.cfg.device_token;
        let _ = self.cloud.update_pin(token, pins::POSITION_A, &a);
        let _ = self.cloud.update_pin(token, pins::POSITION_B, &b);
    }

    fn publish_frames(&mut self, now: Millis) {
        if self.cfg.faults.camera_failure {
            return;
        }
        let Some(session) = &self.session else {
            return;
        };
        let state = self.rig.lock().unwrap().clone();
        let digest = state.digest();
        if self.frame_cache.len() > 32 {
            self.frame_cache.clear();
        }
        for (idx, (cam, media_id)) in self.cfg.cameras.iter().zip(&session.media).enumerate() {
            let frame_id = format!("{}/{}", self.cfg.node_id, cam.camera_id);
            let image = match self.frame_cache.get(&(idx, digest)) {
                Some(img) => img.clone(),
                None => {
                    let seed = self.cfg.seed ^ digest ^ ((idx as u64 + 1) << 56);
                    let Ok(frame) = render_frame(&state, &frame_id, &self.cfg.render, seed, now) else {
                        continue;
                    };
                    self.frame_cache.insert((idx, digest), frame.image.clone());
                    frame.image
                }
            };
            let _ = self.media.publish_frame(*media_id, Frame::new(image, now, frame_id), now);
        }
    }
}

/// Default camera set for a node role of the given experiment.
pub fn default_cameras(kind: ExperimentKind, role: AgentRole) -> Vec<CameraSpec> {
    let cam = |id: &str, profile: &str| CameraSpec {
        camera_id: id.into(),
        profile: profile.into(),
    };
    match (kind, role) {
        (ExperimentKind::FocalLength, AgentRole::Control) => vec![cam("screen", "pi3b")],
        (ExperimentKind::FocalLength, AgentRole::StreamOnly) => vec![cam("side", "pizero2w")],
        (ExperimentKind::VanishingRod, _) => vec![cam("beakers", "pi3b")],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::cloud::PinStore;
    use crate::physics::LensBenchState;
    use crate::signaling::{Broker, InboxItem, LatencyProfiles};

    struct Bench {
        clock: VirtualClock,
        cloud: Arc<PinStore>,
        broker: Arc<Broker>,
        agent: Agent,
    }

    fn config(faults: FaultFlags) -> AgentConfig {
        AgentConfig {
            experiment_id: "FL".into(),
            node_id: "fl-1".into(),
            device_id: "fl-1-ctl".into(),
            secret: "s3cret".into(),
            device_token: "tok-fl-1".into(),
            role: AgentRole::Control,
            cameras: default_cameras(ExperimentKind::FocalLength, AgentRole::Control),
            session_duration_s: 300,
            frame_interval_ms: 200,
            home_u_steps: 20_000,
            home_v_steps: 20_000,
            faults,
            seed: 7,
            render: RenderConfig::default(),
        }
    }

    fn bench(faults: FaultFlags) -> Bench {
        let clock = VirtualClock::new();
        let cloud = Arc::new(PinStore::new(Arc::new(clock.clone())));
        cloud.register_device("tok-fl-1");
        let broker = Arc::new(Broker::new(LatencyProfiles::default()));
        broker.register("user-7", 0).unwrap();
        let rig = new_rig(ExperimentState::FocalLength(LensBenchState {
            v_steps: 23_000,
            ..Default::default()
        }));
        let agent = Agent::new(config(faults), rig, cloud.clone(), broker.clone(), 0);
        Bench {
            clock,
            cloud,
            broker,
            agent,
        }
    }

    fn authorize(b: &mut Bench) {
        let auth = b.agent.connect(0);
        assert_eq!(auth.type_name(), "AUTH");
        b.agent.on_message(ChannelMessage::AuthOk { room: "fl-1".into() }, 0);
        assert_eq!(b.agent.phase(), Phase::Idle);
    }

    fn start(b: &mut Bench, now: Millis) -> Vec<ChannelMessage> {
        b.agent.on_message(
            ChannelMessage::SessionStart {
                session_id: "s-1".into(),
                user_peer_id: "user-7".into(),
                duration_s: 300,
            },
            now,
        )
    }

    fn pin(b: &Bench, p: &str) -> Option<String> {
        b.cloud.get_pin("tok-fl-1", p).unwrap()
    }

    #[test]
    fn boot_homes_and_clears_error_pin() {
        let b = bench(FaultFlags::default());
        let ExperimentState::FocalLength(s) = b.agent.rig().lock().unwrap().clone() else { panic!() };
        assert_eq!((s.u_steps, s.v_steps), (20_000, 20_000));
        assert_eq!(pin(&b, pins::ERROR).as_deref(), Some("0"));
        assert_eq!(pin(&b, pins::POSITION_B).as_deref(), Some("20.000"));
    }

    #[test]
    fn session_start_acks_and_calls() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        assert!(b.cloud.is_connected("tok-fl-1"));
        let out = start(&mut b, 10);
        assert_eq!(out, vec![ChannelMessage::Ack { session_id: "s-1".into() }]);
        assert_eq!(b.agent.phase(), Phase::InSession);
        assert_eq!(b.broker.sessions_for("user-7").len(), 1);
        // a second start while busy is not acknowledged
        assert!(start(&mut b, 20).is_empty());
    }

    #[test]
    fn screen_move_updates_pins_after_motor_time() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        start(&mut b, 0);
        b.agent.on_message(
            ChannelMessage::Input {
                session_id: "s-1".into(),
                params: InputParams::Lens { target: Target::Screen, steps: 500 },
            },
            100,
        );
        b.clock.advance_to(225);
        b.agent.poll(225);
        assert_eq!(pin(&b, pins::POSITION_B).as_deref(), Some("20.500"));
        let ExperimentState::FocalLength(s) = b.agent.rig().lock().unwrap().clone() else { panic!() };
        assert_eq!(s.v_steps, 20_500);
        assert_eq!(s.drive().displacement_mm(500), 5.0);
    }

    #[test]
    fn stall_moves_less_than_believed() {
        let mut b = bench(FaultFlags {
            motor_stall: Some(0.4),
            ..Default::default()
        });
        authorize(&mut b);
        start(&mut b, 0);
        b.agent.on_message(
            ChannelMessage::Input {
                session_id: "s-1".into(),
                params: InputParams::Lens { target: Target::Screen, steps: 500 },
            },
            0,
        );
        b.agent.poll(1_000);
        assert_eq!(pin(&b, pins::POSITION_B).as_deref(), Some("20.500"));
        let ExperimentState::FocalLength(s) = b.agent.rig().lock().unwrap().clone() else { panic!() };
        assert_eq!(s.v_steps, 20_200);
    }

    #[test]
    fn overrun_is_clamped_with_e03() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        start(&mut b, 0);
        let out = b.agent.on_message(
            ChannelMessage::Input {
                session_id: "s-1".into(),
                params: InputParams::Lens { target: Target::Screen, steps: 40_000 },
            },
            0,
        );
        assert!(matches!(out[0], ChannelMessage::Error { code: ErrorCode::E03, .. }));
        b.agent.poll(60_000);
        assert_eq!(pin(&b, pins::ERROR).as_deref(), Some("E03"));
        assert_eq!(pin(&b, pins::POSITION_B).as_deref(), Some("50.000"));
    }

    #[test]
    fn timer_expiry_ends_session_and_rehomes() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        start(&mut b, 0);
        b.agent.on_message(
            ChannelMessage::Input {
                session_id: "s-1".into(),
                params: InputParams::Lens { target: Target::Object, steps: -700 },
            },
            0,
        );
        let mut ended = None;
        let mut t = 0;
        while ended.is_none() {
            t = b.agent.next_deadline().unwrap();
            b.clock.advance_to(t);
            ended = b.agent.poll(t).into_iter().find(|m| m.type_name() == "SESSION_END");
        }
        assert_eq!(t, 300_000);
        assert_eq!(
            ended,
            Some(ChannelMessage::SessionEnd {
                session_id: "s-1".into(),
                reason: EndReason::Timeout
            })
        );
        assert_eq!(b.agent.phase(), Phase::Idle);
        let ExperimentState::FocalLength(s) = b.agent.rig().lock().unwrap().clone() else { panic!() };
        assert_eq!((s.u_steps, s.v_steps), (20_000, 20_000));
        let hangups = b
            .broker
            .take_inbox("user-7")
            .into_iter()
            .filter(|i| matches!(i, InboxItem::Hangup { reason, .. } if reason == "timeout"))
            .count();
        assert_eq!(hangups, 1);
    }

    #[test]
    fn frames_follow_the_tick() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        start(&mut b, 0);
        for t in (200..=1_000).step_by(200) {
            b.agent.poll(t);
        }
        b.broker.pump(10_000);
        let n = b.broker.take_inbox("user-7").len();
        assert_eq!(n, 6);
    }

    #[test]
    fn stuck_switch_reports_e02_at_boot() {
        let b = bench(FaultFlags {
            stuck_limit_switch: true,
            ..Default::default()
        });
        assert_eq!(b.agent.error(), Some(ErrorCode::E02));
        assert_eq!(pin(&b, pins::ERROR).as_deref(), Some("E02"));
    }

    #[test]
    fn camera_failure_withholds_ack() {
        let mut b = bench(FaultFlags {
            camera_failure: true,
            ..Default::default()
        });
        authorize(&mut b);
        let out = start(&mut b, 0);
        assert!(out.iter().all(|m| m.type_name() != "ACK"));
        assert_eq!(pin(&b, pins::ERROR).as_deref(), Some("E10"));
    }

    #[test]
    fn drop_mid_session_resends_end_after_reauth() {
        let mut b = bench(FaultFlags::default());
        authorize(&mut b);
        start(&mut b, 0);
        b.agent.on_disconnect(1_000);
        assert_eq!(b.agent.phase(), Phase::Disconnected);
        assert_eq!(b.agent.reconnect_delay(), 1_000);
        b.agent.connect(2_000);
        let out = b.agent.on_message(ChannelMessage::AuthOk { room: "fl-1".into() }, 2_000);
        assert!(out.contains(&ChannelMessage::SessionEnd {
            session_id: "s-1".into(),
            reason: EndReason::Disconnected
        }));
        assert_eq!(b.agent.phase(), Phase::Idle);
    }

    #[test]
    fn rejected_agent_stays_down() {
        let mut b = bench(FaultFlags::default());
        b.agent.connect(0);
        b.agent.on_message(ChannelMessage::AuthFail { reason: "bad secret".into() }, 0);
        assert_eq!(b.agent.phase(), Phase::Rejected);
        assert!(!b.agent.can_reconnect());
    }
}
