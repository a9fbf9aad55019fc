//! Starts a chosen subset of the services in this process.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::Router;
use rlabs_core::clock::{Clock, Millis, SystemClock};
use rlabs_core::cloud::{CloudApi, PinStore};
use rlabs_core::config::{ConfigError, PlatformConfig, SinkConfig};
use rlabs_core::orchestrator::Orchestrator;
use rlabs_core::signaling::Broker;
use rlabs_core::tester::{CheckReport, Ledger, Notifier, Scheduler, Tester};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::runtime::Runtime;
use tokio::sync::watch;

use crate::agents::{spawn_fleet, AgentEndpoints, AgentFleet, FleetOptions};
use crate::client::HttpLabClient;
use crate::remote::{HttpCloud, UreqWebhook};
use crate::routes::{cloud_router, orchestrator_router, signaling_router, DeviceHub, OrchestratorState, SignalingState};

const ORCH_TICK: Duration = Duration::from_millis(10);
const PUMP_TICK: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Role {
    Cloud,
    Signaling,
    Orchestrator,
    Agents,
    Tester,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Cloud, Role::Signaling, Role::Orchestrator, Role::Agents, Role::Tester];

    pub fn name(self) -> &'static str {
        match self {
            Role::Cloud => "cloud",
            Role::Signaling => "signaling",
            Role::Orchestrator => "orchestrator",
            Role::Agents => "agents",
            Role::Tester => "tester",
        }
    }
}

#[derive(Debug)]
pub enum LaunchError {
    Config(ConfigError),
    Bind { role: Role, addr: String, error: std::io::Error },
    Io(std::io::Error),
}

impl std::fmt::Display for LaunchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LaunchError::Config(e) => write!(f, "invalid config: {e}"),
            LaunchError::Bind { role, addr, error } => write!(f, "{} cannot bind {addr}: {error}", role.name()),
            LaunchError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LaunchError {}

impl From<ConfigError> for LaunchError {
    fn from(e: ConfigError) -> Self {
        LaunchError::Config(e)
    }
}

/// Receives each readiness or progress record as a JSON value.
type ReadyGate = Box<dyn Fn() -> bool + Send>;

pub type EventSink = Arc<dyn Fn(Value) + Send + Sync>;

pub struct LaunchOptions {
    pub agents: FleetOptions,
    /// Overrides the configured tester interval.
    pub tester_interval_ms: Option<Millis>,
    pub events: EventSink,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        Self {
            agents: FleetOptions::default(),
            tester_interval_ms: None,
            events: Arc::new(|_| {}),
        }
    }
}

/// Addresses the services answer on, after binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    pub cloud: String,
    pub signaling: String,
    pub orchestrator: String,
}

/// Builds the tester the `tester` role and `rlabs test` use.
pub fn configured_tester(cfg: &PlatformConfig) -> Tester {
    let notifier = match &cfg.sink {
        SinkConfig::Webhook { .. } => Notifier::new(cfg.sink.clone()).with_transport(Box::new(UreqWebhook::default())),
        _ => Notifier::new(cfg.sink.clone()),
    };
    Tester::new(cfg)
        .with_notifier(notifier)
        .with_ledger(Ledger::new(cfg.tester.ledger_path.clone()))
}

/// One-line JSON summary of a finished check.
pub fn check_event(r: &CheckReport) -> Value {
    json!({
        "event": "check",
        "report_id": r.report_id,
        "experiment_id": r.experiment_id,
        "node_id": r.node_id,
        "timestamp": r.timestamp,
        "passed": r.passed(),
        "reasons": r.reason_labels(),
    })
}

pub struct Stack {
    runtime: Option<Runtime>,
    shutdown: watch::Sender<bool>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    endpoints: Endpoints,
    store: Option<Arc<PinStore>>,
    broker: Option<Arc<Broker>>,
    orchestrator: Option<Arc<Orchestrator>>,
    hub: Option<Arc<DeviceHub>>,
    agents: Option<AgentFleet>,
}

impl Stack {
    pub fn launch(cfg: &PlatformConfig, roles: &[Role], opts: LaunchOptions) -> Result<Stack, LaunchError> {
        cfg.validate()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .map_err(LaunchError::Io)?;
        let (shutdown, _) = watch::channel(false);
        let mut stack = Stack {
            runtime: None,
            shutdown,
            stop: Arc::new(AtomicBool::new(false)),
            threads: Vec::new(),
            endpoints: Endpoints {
                cloud: cfg.cloud_bind.clone(),
                signaling: cfg.signaling_bind.clone(),
                orchestrator: cfg.orchestrator_bind.clone(),
            },
            store: None,
            broker: None,
            orchestrator: None,
            hub: None,
            agents: None,
        };
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
        let events = opts.events.clone();
        let has = |r: Role| roles.contains(&r);

        if has(Role::Cloud) {
            let mut store = PinStore::new(clock.clone());
            if let Some(path) = &cfg.journal_path {
                store = store.with_journal(path).map_err(LaunchError::Io)?;
            }
            let store = Arc::new(store);
            for dev in cfg.experiments.iter().flat_map(|e| &e.nodes).flat_map(|n| &n.devices) {
                store.register_device(&dev.token);
            }
            let addr = stack.serve(&runtime, Role::Cloud, &cfg.cloud_bind, cloud_router(store.clone()))?;
            stack.endpoints.cloud = addr.to_string();
            stack.store = Some(store);
            events(json!({ "event": "ready", "role": "cloud", "addr": addr.to_string() }));
        }

        if has(Role::Signaling) {
            let broker = Arc::new(Broker::new(cfg.latency_profiles.clone()));
            let state = SignalingState {
                broker: broker.clone(),
                clock: clock.clone(),
            };
            let addr = stack.serve(&runtime, Role::Signaling, &cfg.signaling_bind, signaling_router(state))?;
            let (b, c, stop) = (broker.clone(), clock.clone(), stack.stop.clone());
            stack.threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    b.pump(c.now_ms());
                    std::thread::sleep(PUMP_TICK);
                }
            }));
            stack.endpoints.signaling = addr.to_string();
            stack.broker = Some(broker);
            events(json!({ "event": "ready", "role": "signaling", "addr": addr.to_string() }));
        }

        if has(Role::Orchestrator) {
            let cloud: Arc<dyn CloudApi> = match &stack.store {
                Some(s) => s.clone(),
                None => Arc::new(HttpCloud::new(&stack.endpoints.cloud)),
            };
            let orch = Arc::new(Orchestrator::new(cfg, cloud));
            let hub = Arc::new(DeviceHub::new());
            let state = OrchestratorState {
                orch: orch.clone(),
                clock: clock.clone(),
                hub: hub.clone(),
            };
            let addr = stack.serve(&runtime, Role::Orchestrator, &cfg.orchestrator_bind, orchestrator_router(state))?;
            let (o, h, c, stop) = (orch.clone(), hub.clone(), clock.clone(), stack.stop.clone());
            stack.threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    h.route(o.poll(c.now_ms()));
                    std::thread::sleep(ORCH_TICK);
                }
            }));
            stack.endpoints.orchestrator = addr.to_string();
            stack.orchestrator = Some(orch);
            stack.hub = Some(hub);
            events(json!({ "event": "ready", "role": "orchestrator", "addr": addr.to_string() }));
        }
        stack.runtime = Some(runtime);

        if has(Role::Agents) {
            let endpoints = AgentEndpoints {
                orchestrator: stack.endpoints.orchestrator.clone(),
                cloud: stack.endpoints.cloud.clone(),
                signaling: stack.endpoints.signaling.clone(),
            };
            let ev = events.clone();
            stack.agents = Some(spawn_fleet(cfg, &endpoints, opts.agents, Arc::new(move |n| ev(n.to_json()))));
        }

        if has(Role::Tester) {
            let interval = opts.tester_interval_ms.unwrap_or(cfg.tester.interval_s * 1_000).max(1);
            let gate: Option<ReadyGate> = stack.agents.as_ref().map(|a| Box::new(a.readiness()) as ReadyGate);
            stack.spawn_tester(cfg, interval, clock, gate, events.clone());
            events(json!({ "event": "ready", "role": "tester", "interval_ms": interval }));
        }
        Ok(stack)
    }

    fn serve(&self, runtime: &Runtime, role: Role, addr: &str, router: Router) -> Result<SocketAddr, LaunchError> {
        let bind_err = |error| LaunchError::Bind {
            role,
            addr: addr.to_string(),
            error,
        };
        let listener = runtime.block_on(TcpListener::bind(addr)).map_err(bind_err)?;
        let local = listener.local_addr().map_err(bind_err)?;
        let mut rx = self.shutdown.subscribe();
        runtime.spawn(async move {
            let stopping = async move {
                let _ = rx.wait_for(|s| *s).await;
            };
            if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(stopping).await {
                tracing::error!(role = role.name(), error = %e, "server stopped");
            }
        });
        Ok(local)
    }

    /// Runs scheduled checks. The first tick waits for `gate` (the co-located
    /// agents) for at most one interval; with no gate it comes one interval
    /// after launch.
    fn spawn_tester(
        &mut self,
        cfg: &PlatformConfig,
        interval_ms: Millis,
        clock: Arc<dyn Clock>,
        gate: Option<ReadyGate>,
        events: EventSink,
    ) {
        let tester = Arc::new(configured_tester(cfg));
        let endpoints = self.endpoints.clone();
        let stop = self.stop.clone();
        self.threads.push(std::thread::spawn(move || {
            let launched = clock.now_ms();
            let mut sched: Option<Scheduler> = None;
            let (done_tx, done_rx) = mpsc::channel::<CheckReport>();
            // one check at a time: the tester account may hold only one experiment
            let (work_tx, work_rx) = mpsc::channel::<String>();
            let worker_tester = tester.clone();
            std::thread::spawn(move || {
                for exp in work_rx {
                    let mut client = HttpLabClient::new(&endpoints.orchestrator, &endpoints.signaling);
                    if done_tx.send(worker_tester.run_check(&mut client, &exp)).is_err() {
                        break;
                    }
                }
            });
            while !stop.load(Ordering::SeqCst) {
                let now = clock.now_ms();
                if sched.is_none() && (gate.as_ref().is_some_and(|ready| ready()) || now >= launched + interval_ms) {
                    sched = Some(Scheduler::new(interval_ms, now, tester.experiment_ids()).expect("positive interval"));
                }
                let Some(sched) = sched.as_mut() else {
                    std::thread::sleep(Duration::from_millis(100));
                    continue;
                };
                for exp in sched.poll(now) {
                    let _ = work_tx.send(exp);
                }
                while let Ok(r) = done_rx.try_recv() {
                    sched.finished(&r.experiment_id);
                    events(check_event(&r));
                }
                std::thread::sleep(Duration::from_millis(100));
            }
        }));
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    pub fn store(&self) -> Option<&Arc<PinStore>> {
        self.store.as_ref()
    }

    pub fn broker(&self) -> Option<&Arc<Broker>> {
        self.broker.as_ref()
    }

    pub fn orchestrator(&self) -> Option<&Arc<Orchestrator>> {
        self.orchestrator.as_ref()
    }

    pub fn hub(&self) -> Option<&Arc<DeviceHub>> {
        self.hub.as_ref()
    }

    pub fn agents(&self) -> Option<&AgentFleet> {
        self.agents.as_ref()
    }

    /// Waits until every agent has been authorized once.
    pub fn wait_agents_ready(&self, timeout: Duration) -> bool {
        self.agents.as_ref().is_none_or(|a| a.wait_ready(timeout))
    }

    /// Stops everything and returns how each agent ended.
    pub fn shutdown(mut self) -> Vec<(String, crate::agents::AgentExit)> {
        self.stop_all()
    }

    fn stop_all(&mut self) -> Vec<(String, crate::agents::AgentExit)> {
        self.stop.store(true, Ordering::SeqCst);
        let exits = match self.agents.take() {
            Some(fleet) => {
                fleet.stop();
                fleet.join()
            }
            None => Vec::new(),
        };
        let _ = self.shutdown.send(true);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
        exits
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        self.stop_all();
    }
}
