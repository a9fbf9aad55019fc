//! Scripted, virtual-time runs of the whole platform. A script lists timed
//! user actions, fault injections, tester runs and expectations; the run
//! yields a [`ScenarioReport`] that is byte-identical for identical inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::FaultFlags;
use crate::clock::{parse_iso8601, Millis};
use crate::config::{ConfigError, PlatformConfig, SinkConfig};
use crate::orchestrator::{EntryStatus, EventKind};
use crate::physics::ExperimentState;
use crate::sim::{check_session_flow, World};
use crate::tester::{CheckReport, Notifier, Tester};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetSpec {
    #[serde(default)]
    pub fl: usize,
    #[serde(default)]
    pub vr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    /// Generated fleet; ignored when `config` or `config_path` is given.
    #[serde(default)]
    pub fleet: Option<FleetSpec>,
    #[serde(default)]
    pub config: Option<PlatformConfig>,
    /// Config file, relative to the script's directory.
    #[serde(default)]
    pub config_path: Option<PathBuf>,
    #[serde(default)]
    pub session_duration_s: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Virtual start time, ISO-8601.
    #[serde(default = "default_start")]
    pub start: String,
    pub steps: Vec<Step>,
}

fn default_start() -> String {
    "2024-01-01T00:00:00Z".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Run the step at this offset from the start (ms); steps run in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<Millis>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Action {
    Enter {
        user: String,
        experiment: String,
    },
    Leave {
        user: String,
        experiment: String,
    },
    Input {
        user: String,
        experiment: String,
        params: serde_json::Value,
    },
    Advance {
        ms: Millis,
    },
    /// `status` is one of granted, pending, queued, offline, idle.
    ExpectStatus {
        user: String,
        experiment: String,
        status: String,
        #[serde(default)]
        position: Option<usize>,
        #[serde(default)]
        node: Option<String>,
    },
    /// `status` is one of vacant, probing, occupied, offline.
    ExpectNode {
        experiment: String,
        node: String,
        status: String,
    },
    /// Number of sessions granted so far on the experiment.
    ExpectGrants {
        experiment: String,
        count: usize,
    },
    /// Every session that has ended so far followed the full protocol.
    ExpectSessionFlows,
    Fault {
        device: String,
        #[serde(default)]
        faults: FaultFlags,
    },
    PowerCycle {
        device: String,
    },
    DropLink {
        device: String,
        #[serde(default)]
        down_for_ms: Option<Millis>,
    },
    RestoreLink {
        device: String,
    },
    SetWaterLevel {
        node: String,
        level: f64,
    },
    RunCheck {
        experiment: String,
        #[serde(default)]
        label: Option<String>,
    },
    ExpectCheck {
        label: String,
        pass: bool,
        /// Reason labels, compared as a list.
        #[serde(default)]
        reasons: Option<Vec<String>>,
    },
    ExpectNotifications {
        count: usize,
    },
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::Enter { .. } => "enter",
            Action::Leave { .. } => "leave",
            Action::Input { .. } => "input",
            Action::Advance { .. } => "advance",
            Action::ExpectStatus { .. } => "expect_status",
            Action::ExpectNode { .. } => "expect_node",
            Action::ExpectGrants { .. } => "expect_grants",
            Action::ExpectSessionFlows => "expect_session_flows",
            Action::Fault { .. } => "fault",
            Action::PowerCycle { .. } => "power_cycle",
            Action::DropLink { .. } => "drop_link",
            Action::RestoreLink { .. } => "restore_link",
            Action::SetWaterLevel { .. } => "set_water_level",
            Action::RunCheck { .. } => "run_check",
            Action::ExpectCheck { .. } => "expect_check",
            Action::ExpectNotifications { .. } => "expect_notifications",
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad scenario script: {0}")]
    Script(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    /// Offset from the scenario start when the step ran.
    pub at_ms: Millis,
    pub op: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub steps: Vec<StepOutcome>,
    pub checks: Vec<CheckReport>,
    pub notifications: usize,
    pub failures: Vec<String>,
    pub trace_entries: usize,
}

impl ScenarioReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Script(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut script = Self::from_json(&text)?;
        if let Some(rel) = &script.config_path {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            script.config = Some(PlatformConfig::load(&full)?);
            script.config_path = None;
        }
        Ok(script)
    }

    /// The platform config this script runs against.
    pub fn platform_config(&self) -> Result<PlatformConfig, ScenarioError> {
        let mut cfg = match (&self.config, &self.fleet, &self.config_path) {
            (Some(c), _, _) => c.clone(),
            (None, _, Some(p)) => PlatformConfig::load(p)?,
            (None, Some(f), None) => PlatformConfig::fleet(f.fl, f.vr),
            (None, None, None) => return Err(ScenarioError::Script("one of fleet, config or config_path is required".into())),
        };
        if let Some(d) = self.session_duration_s {
            cfg.session_duration_s = d;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.sink = SinkConfig::Memory;
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Runner {
    world: World,
    tester: Tester,
    secrets: BTreeMap<String, String>,
    tokens: BTreeMap<String, String>,
    checks: BTreeMap<String, CheckReport>,
    run_order: Vec<CheckReport>,
    base: Millis,
}

impl Runner {
    fn token(&mut self, user: &str) -> Result<String, String> {
        if let Some(t) = self.tokens.get(user) {
            return Ok(t.clone());
        }
        let secret = self.secrets.get(user).ok_or_else(|| format!("unknown user {user}"))?.clone();
        let token = self.world.login(user, &secret).map_err(|e| e.to_string())?;
        self.world
            .register_peer(&format!("peer-{user}"))
            .map_err(|e| e.to_string())?;
        self.tokens.insert(user.to_string(), token.clone());
        Ok(token)
    }

    fn exec(&mut self, action: &Action) -> Result<serde_json::Value, String> {
        match action {
            Action::Enter { user, experiment } => {
                let t = self.token(user)?;
                let st = self
                    .world
                    .enter(&t, experiment, &format!("peer-{user}"))
                    .map_err(|e| e.to_string())?;
                Ok(st.to_json())
            }
            Action::Leave { user, experiment } => {
                let t = self.token(user)?;
                self.world.leave(&t, experiment).map_err(|e| e.to_string())?;
                Ok(serde_json::Value::Null)
            }
            Action::Input {
                user,
                experiment,
                params,
            } => {
                let t = self.token(user)?;
                self.world.input(&t, experiment, params).map_err(|e| e.to_string())?;
                Ok(serde_json::Value::Null)
            }
            Action::Advance { ms } => {
                self.world.advance(*ms);
                Ok(serde_json::Value::Null)
            }
            Action::ExpectStatus {
                user,
                experiment,
                status,
                position,
                node,
            } => {
                let t = self.token(user)?;
                let st = self.world.status(&t, experiment).map_err(|e| e.to_string())?;
                let got = st.to_json();
                let (name, pos, got_node) = match &st {
                    EntryStatus::Pending { node_id, .. } => ("pending", None, Some(node_id)),
                    EntryStatus::Granted { node_id, .. } => ("granted", None, Some(node_id)),
                    EntryStatus::Queued { position, .. } => ("queued", Some(*position), None),
                    EntryStatus::Offline => ("offline", None, None),
                    EntryStatus::Idle => ("idle", None, None),
                };
                let ok = name == status
                    && position.is_none_or(|p| pos == Some(p))
                    && node.as_ref().is_none_or(|n| got_node == Some(n));
                if ok {
                    Ok(got)
                } else {
                    Err(format!("expected {status} (position {position:?}, node {node:?}), got {got}"))
                }
            }
            Action::ExpectNode {
                experiment,
                node,
                status,
            } => {
                let nodes = self.world.orchestrator().nodes(experiment).map_err(|e| e.to_string())?;
                let n = nodes
                    .iter()
                    .find(|n| &n.node_id == node)
                    .ok_or_else(|| format!("no node {node}"))?;
                if &n.status == status {
                    Ok(json!({ "status": n.status }))
                } else {
                    Err(format!("node {node} is {}, expected {status}", n.status))
                }
            }
            Action::ExpectGrants { experiment, count } => {
                let got = self
                    .world
                    .orchestrator()
                    .events()
                    .iter()
                    .filter(|e| &e.experiment_id == experiment && matches!(e.kind, EventKind::Granted { .. }))
                    .count();
                if got == *count {
                    Ok(json!({ "grants": got }))
                } else {
                    Err(format!("{got} grants on {experiment}, expected {count}"))
                }
            }
            Action::ExpectSessionFlows => {
                let window = self.world.orchestrator().settings().ack_timeout_ms;
                let ended: Vec<String> = self
                    .world
                    .orchestrator()
                    .events()
                    .iter()
                    .filter_map(|e| match &e.kind {
                        EventKind::SessionEnded { session_id, .. } => Some(session_id.clone()),
                        _ => None,
                    })
                    .collect();
                let mut checked = Vec::new();
                for sid in &ended {
                    let flow = check_session_flow(self.world.trace(), sid, window).map_err(|e| format!("{sid}: {e}"))?;
                    checked.push(json!({ "session_id": sid, "node_id": flow.node_id, "ack_latency_ms": flow.ack_latency_ms }));
                }
                Ok(json!({ "sessions": checked }))
            }
            Action::Fault { device, faults } => {
                if self.world.set_faults(device, *faults) {
                    Ok(serde_json::Value::Null)
                } else {
                    Err(format!("no device {device}"))
                }
            }
            Action::PowerCycle { device } => {
                if self.world.power_cycle(device) {
                    Ok(serde_json::Value::Null)
                } else {
                    Err(format!("no device {device}"))
                }
            }
            Action::DropLink { device, down_for_ms } => {
                if self.world.drop_link(device, *down_for_ms) {
                    Ok(serde_json::Value::Null)
                } else {
                    Err(format!("no device {device}"))
                }
            }
            Action::RestoreLink { device } => {
                if self.world.restore_link(device) {
                    Ok(serde_json::Value::Null)
                } else {
                    Err(format!("no device {device}"))
                }
            }
            Action::SetWaterLevel { node, level } => {
                let level = *level;
                let mut kind_ok = false;
                let found = self.world.with_rig(node, |s| {
                    if let ExperimentState::VanishingRod(r) = s {
                        r.water_level = level.clamp(0.0, 1.0);
                        kind_ok = true;
                    }
                });
                if found && kind_ok {
                    Ok(serde_json::Value::Null)
                } else {
                    Err(format!("no vanishing-rod node {node}"))
                }
            }
            Action::RunCheck { experiment, label } => {
                let report = self.tester.run_check(&mut self.world, experiment);
                let detail = json!({
                    "report_id": report.report_id,
                    "pass": report.passed(),
                    "reasons": report.reason_labels(),
                });
                let key = label.clone().unwrap_or_else(|| report.report_id.clone());
                self.checks.insert(key, report.clone());
                self.run_order.push(report);
                Ok(detail)
            }
            Action::ExpectCheck { label, pass, reasons } => {
                let r = self.checks.get(label).ok_or_else(|| format!("no check labelled {label}"))?;
                let got = r.reason_labels();
                if r.passed() != *pass {
                    return Err(format!("check {label}: pass={} reasons={got:?}", r.passed()));
                }
                if let Some(want) = reasons {
                    if &got != want {
                        return Err(format!("check {label}: reasons {got:?}, expected {want:?}"));
                    }
                }
                Ok(json!({ "reasons": got }))
            }
            Action::ExpectNotifications { count } => {
                let got = self.tester.notifier().map_or(0, Notifier::delivered);
                if got == *count {
                    Ok(json!({ "notifications": got }))
                } else {
                    Err(format!("{got} notifications, expected {count}"))
                }
            }
        }
    }
}

/// How long the runner waits for every agent to authorize before step one.
pub const READY_TIMEOUT_MS: Millis = 5_000;

pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioReport, ScenarioError> {
    let cfg = script.platform_config()?;
    let start = parse_iso8601(&script.start).ok_or_else(|| ScenarioError::Script(format!("bad start time {:?}", script.start)))?;
    let seed = cfg.seed;
    let tester = Tester::new(&cfg).with_notifier(Notifier::new(SinkConfig::Memory));
    let secrets = cfg
        .accounts()
        .into_iter()
        .map(|u| (u.username, u.secret))
        .collect();
    let mut world = World::new(cfg, start)?;
    let mut failures = Vec::new();
    if !world.run_until_pred(READY_TIMEOUT_MS, 10, World::all_agents_ready) {
        failures.push("agents did not all reach idle".to_string());
    }
    let base = world.now();
    let mut r = Runner {
        world,
        tester,
        secrets,
        tokens: BTreeMap::new(),
        checks: BTreeMap::new(),
        run_order: Vec::new(),
        base,
    };
    let mut steps = Vec::new();
    for (index, step) in script.steps.iter().enumerate() {
        if let Some(at) = step.at_ms {
            let t = r.base + at;
            if t < r.world.now() {
                return Err(ScenarioError::Script(format!(
                    "step {index} at {at} ms runs before the previous step finished ({} ms)",
                    r.world.now() - r.base
                )));
            }
            r.world.run_until(t);
        }
        let at_ms = r.world.now() - r.base;
        let outcome = r.exec(&step.action);
        let (ok, detail, error) = match outcome {
            Ok(d) => (true, d, None),
            Err(e) => {
                failures.push(format!("step {index} ({}): {e}", step.action.name()));
                (false, serde_json::Value::Null, Some(e))
            }
        };
        steps.push(StepOutcome {
            index,
            at_ms,
            op: step.action.name().to_string(),
            ok,
            detail,
            error,
        });
    }
    Ok(ScenarioReport {
        name: script.name.clone(),
        seed,
        passed: failures.is_empty(),
        steps,
        notifications: r.tester.notifier().map_or(0, Notifier::delivered),
        checks: r.run_order,
        failures,
        trace_entries: r.world.trace().len(),
    })
}
