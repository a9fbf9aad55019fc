//! Device agents on real sockets: one thread per device, a WebSocket
//! channel to the orchestrator and HTTP to the cloud and signaling services.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rlabs_core::agent::{new_rig, Agent};
use rlabs_core::clock::{Clock, SystemClock};
use rlabs_core::config::PlatformConfig;
use rlabs_core::protocol::ChannelMessage;
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::remote::{base_url, ws_url, HttpCloud, HttpMedia};

/// Read timeout on an open channel; bounds how late a timer can fire.
const TICK: Duration = Duration::from_millis(10);

/// Opens a WebSocket to `addr` (`host:port` or `http://host:port`) and
/// leaves the socket with a short read timeout.
pub fn connect_ws(addr: &str, path: &str, timeout: Duration, read_timeout: Duration) -> Result<WebSocket<TcpStream>, String> {
    let hostport = base_url(addr)
        .trim_start_matches("http://")
        .trim_start_matches("https://")
        .to_string();
    let sock = hostport
        .to_socket_addrs()
        .map_err(|e| format!("{hostport}: {e}"))?
        .next()
        .ok_or_else(|| format!("{hostport}: no address"))?;
    let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| format!("{hostport}: {e}"))?;
    stream.set_read_timeout(Some(timeout)).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let (ws, _) = tungstenite::client(ws_url(addr, path), stream).map_err(|e| format!("{hostport}{path}: {e}"))?;
    ws.get_ref().set_read_timeout(Some(read_timeout)).map_err(|e| e.to_string())?;
    Ok(ws)
}

pub(crate) fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentEndpoints {
    pub orchestrator: String,
    pub cloud: String,
    pub signaling: String,
}

impl AgentEndpoints {
    pub fn from_config(cfg: &PlatformConfig) -> Self {
        Self {
            orchestrator: cfg.orchestrator_bind.clone(),
            cloud: cfg.cloud_bind.clone(),
            signaling: cfg.signaling_bind.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FleetOptions {
    /// Consecutive failed connection attempts before an agent gives up.
    pub max_attempts: u32,
    pub connect_timeout: Duration,
}

impl Default for FleetOptions {
    fn default() -> Self {
        Self {
            max_attempts: 10,
            connect_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentExit {
    Stopped,
    Rejected(String),
    GaveUp { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentNotice {
    Ready { device_id: String, room: String },
    /// Every agent of the fleet has been authorized at least once.
    AllReady { count: usize },
    Disconnected { device_id: String, attempt: u32, error: String },
    Exited { device_id: String, exit: AgentExit },
}

impl AgentNotice {
    /// The JSON line printed for this notice.
    pub fn to_json(&self) -> Value {
        match self {
            AgentNotice::Ready { device_id, room } => {
                json!({ "event": "ready", "role": "agent", "device_id": device_id, "room": room, "phase": "idle" })
            }
            AgentNotice::AllReady { count } => json!({ "event": "ready", "role": "agents", "count": count }),
            AgentNotice::Disconnected { device_id, attempt, error } => {
                json!({ "event": "retry", "role": "agent", "device_id": device_id, "attempt": attempt, "error": error })
            }
            AgentNotice::Exited { device_id, exit } => {
                let (why, detail) = match exit {
                    AgentExit::Stopped => ("stopped", Value::Null),
                    AgentExit::Rejected(r) => ("rejected", json!(r)),
                    AgentExit::GaveUp { attempts } => ("gave_up", json!(attempts)),
                };
                json!({ "event": "exit", "role": "agent", "device_id": device_id, "reason": why, "detail": detail })
            }
        }
    }
}

pub type NoticeSink = Arc<dyn Fn(AgentNotice) + Send + Sync>;

/// Running agent threads.
pub struct AgentFleet {
    stop: Arc<AtomicBool>,
    handles: Vec<(String, JoinHandle<AgentExit>)>,
    ready: Arc<Mutex<BTreeSet<String>>>,
}

impl AgentFleet {
    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    pub fn ready_count(&self) -> usize {
        self.ready.lock().unwrap().len()
    }

    /// A handle that reports whether every agent has reached idle at least once.
    pub fn readiness(&self) -> impl Fn() -> bool + Send + 'static {
        let (ready, total) = (self.ready.clone(), self.len());
        move || ready.lock().unwrap().len() == total
    }

    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let until = Instant::now() + timeout;
        while Instant::now() < until {
            if self.ready_count() == self.len() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        self.ready_count() == self.len()
    }

    /// True once every agent thread has returned.
    pub fn is_finished(&self) -> bool {
        self.handles.iter().all(|(_, h)| h.is_finished())
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(self) -> Vec<(String, AgentExit)> {
        self.handles
            .into_iter()
            .map(|(id, h)| (id, h.join().unwrap_or(AgentExit::Stopped)))
            .collect()
    }
}

/// Starts one thread per configured device.
pub fn spawn_fleet(cfg: &PlatformConfig, endpoints: &AgentEndpoints, opts: FleetOptions, notices: NoticeSink) -> AgentFleet {
    let stop = Arc::new(AtomicBool::new(false));
    let ready = Arc::new(Mutex::new(BTreeSet::new()));
    let total: usize = cfg.experiments.iter().flat_map(|e| &e.nodes).map(|n| n.devices.len()).sum();
    let mut handles = Vec::new();
    for exp in &cfg.experiments {
        for node in &exp.nodes {
            let rig = new_rig(exp.initial_state());
            for dev in &node.devices {
                let agent_cfg = cfg.agent_config(exp, node, dev);
                let (rig, endpoints, stop, ready, notices) =
                    (rig.clone(), endpoints.clone(), stop.clone(), ready.clone(), notices.clone());
                let device_id = dev.device_id.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("agent-{device_id}"))
                    .spawn(move || {
                        let clock = SystemClock::new();
                        let cloud = Arc::new(HttpCloud::new(&endpoints.cloud));
                        let media = Arc::new(HttpMedia::new(&endpoints.signaling));
                        let agent = Agent::new(agent_cfg, rig, cloud, media, clock.now_ms());
                        let mut runner = Runner {
                            agent,
                            clock,
                            endpoints,
                            opts,
                            stop,
                            ready,
                            total,
                            notices: notices.clone(),
                        };
                        let exit = runner.run();
                        notices(AgentNotice::Exited {
                            device_id: runner.agent.device_id().to_string(),
                            exit: exit.clone(),
                        });
                        exit
                    })
                    .expect("spawn agent thread");
                handles.push((dev.device_id.clone(), handle));
            }
        }
    }
    AgentFleet { stop, handles, ready }
}

struct Runner {
    agent: Agent,
    clock: SystemClock,
    endpoints: AgentEndpoints,
    opts: FleetOptions,
    stop: Arc<AtomicBool>,
    ready: Arc<Mutex<BTreeSet<String>>>,
    total: usize,
    notices: NoticeSink,
}

enum Ended {
    Dropped { authorized: bool, error: String },
    Done(AgentExit),
}

impl Runner {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Sleeps for `d`, waking early when the fleet is stopped.
    fn pause(&self, d: Duration) {
        let until = Instant::now() + d;
        while !self.stopped() && Instant::now() < until {
            std::thread::sleep(Duration::from_millis(20).min(until - Instant::now()));
        }
    }

    fn run(&mut self) -> AgentExit {
        let mut failures = 0u32;
        loop {
            if self.stopped() {
                return AgentExit::Stopped;
            }
            let attempt = connect_ws(&self.endpoints.orchestrator, "/device/channel", self.opts.connect_timeout, TICK);
            let error = match attempt {
                Ok(mut ws) => match self.session(&mut ws) {
                    Ended::Done(exit) => return exit,
                    Ended::Dropped { authorized, error } => {
                        if authorized {
                            failures = 0;
                        }
                        error
                    }
                },
                Err(e) => e,
            };
            failures += 1;
            self.agent.on_disconnect(self.clock.now_ms());
            (self.notices)(AgentNotice::Disconnected {
                device_id: self.agent.device_id().to_string(),
                attempt: failures,
                error,
            });
            if failures >= self.opts.max_attempts {
                return AgentExit::GaveUp { attempts: failures };
            }
            self.pause(Duration::from_millis(self.agent.reconnect_delay()));
        }
    }

    fn send_all(ws: &mut WebSocket<TcpStream>, msgs: Vec<ChannelMessage>) -> Result<(), String> {
        for m in msgs {
            ws.send(Message::text(m.to_json())).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn session(&mut self, ws: &mut WebSocket<TcpStream>) -> Ended {
        let mut authorized = false;
        let dropped = |authorized, error: String| Ended::Dropped { authorized, error };
        let hello = self.agent.connect(self.clock.now_ms());
        if let Err(e) = Self::send_all(ws, vec![hello]) {
            return dropped(false, e);
        }
        loop {
            if self.stopped() {
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ended::Done(AgentExit::Stopped);
            }
            match ws.read() {
                Ok(Message::Text(t)) => match ChannelMessage::from_json(&t) {
                    Ok(msg) => {
                        match &msg {
                            ChannelMessage::AuthOk { room } => {
                                authorized = true;
                                self.mark_ready(room);
                            }
                            ChannelMessage::AuthFail { reason } => {
                                self.agent.on_message(msg.clone(), self.clock.now_ms());
                                return Ended::Done(AgentExit::Rejected(reason.clone()));
                            }
                            _ => {}
                        }
                        let out = self.agent.on_message(msg, self.clock.now_ms());
                        if let Err(e) = Self::send_all(ws, out) {
                            return dropped(authorized, e);
                        }
                    }
                    Err(e) => tracing::warn!(device = %self.agent.device_id(), error = %e, "unreadable channel message"),
                },
                Ok(Message::Close(_)) => return dropped(authorized, "channel closed".into()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(e) => return dropped(authorized, e.to_string()),
            }
            let out = self.agent.poll(self.clock.now_ms());
            if let Err(e) = Self::send_all(ws, out) {
                return dropped(authorized, e);
            }
            for (ts, ev) in self.agent.drain_events() {
                tracing::debug!(device = %self.agent.device_id(), ts, event = ?ev);
            }
        }
    }

    fn mark_ready(&self, room: &str) {
        let device_id = self.agent.device_id().to_string();
        let all = {
            let mut ready = self.ready.lock().unwrap();
            ready.insert(device_id.clone()) && ready.len() == self.total
        };
        (self.notices)(AgentNotice::Ready {
            device_id,
            room: room.to_string(),
        });
        if all {
            (self.notices)(AgentNotice::AllReady { count: self.total });
        }
    }
}
