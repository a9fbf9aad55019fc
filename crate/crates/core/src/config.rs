//! Platform configuration shared by every entry point.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{default_cameras, AgentConfig, AgentRole, CameraSpec, FaultFlags};
use crate::clock::Millis;
use crate::physics::{ExperimentKind, ExperimentState, RenderConfig};
use crate::protocol::InputParams;
use crate::signaling::LatencyProfiles;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("malformed config: {0}")]
    Parse(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub device_id: String,
    pub secret: String,
    pub token: String,
    pub role: AgentRole,
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub faults: FaultFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    pub devices: Vec<DeviceConfig>,
}

impl NodeConfig {
    pub fn control(&self) -> Option<&DeviceConfig> {
        self.devices.iter().find(|d| d.role == AgentRole::Control)
    }

    /// Frame ids (`node/camera`) of every camera on the node.
    pub fn camera_ids(&self) -> Vec<String> {
        self.devices
            .iter()
            .flat_map(|d| d.cameras.iter().map(|c| format!("{}/{}", self.node_id, c.camera_id)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub title: String,
    pub nodes: Vec<NodeConfig>,
    /// Rig constants; defaults for the kind when absent.
    #[serde(default)]
    pub physics: Option<ExperimentState>,
}

impl ExperimentConfig {
    pub fn initial_state(&self) -> ExperimentState {
        self.physics.clone().unwrap_or_else(|| ExperimentState::default_for(self.kind))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserConfig {
    pub username: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TesterConfig {
    pub username: String,
    pub secret: String,
    pub interval_s: u64,
    pub readings_per_day: u32,
    pub ledger_path: PathBuf,
    pub ssim_threshold: f64,
    pub fl_tolerance_mm: f64,
    pub vr_tolerance_mm: f64,
    pub first_frame_timeout_ms: Millis,
    pub retry_backoff_ms: Millis,
    /// Upper bound on waiting for one actuation to show up in the output pins.
    pub command_timeout_ms: Millis,
    /// Inputs the virtual user sends to a focal-length node, in order.
    pub fl_script: Vec<serde_json::Value>,
    /// Inputs the virtual user sends to a vanishing-rod node, in order.
    pub vr_script: Vec<serde_json::Value>,
}

impl Default for TesterConfig {
    fn default() -> Self {
        Self {
            username: "tester".into(),
            secret: "tester-secret".into(),
            interval_s: 8 * 3600,
            readings_per_day: 3,
            ledger_path: PathBuf::from("ledger.ndjson"),
            ssim_threshold: 0.98,
            fl_tolerance_mm: 0.5,
            vr_tolerance_mm: 1.0,
            first_frame_timeout_ms: 5_000,
            retry_backoff_ms: 30_000,
            command_timeout_ms: 30_000,
            fl_script: vec![
                serde_json::json!({"target": "screen", "steps": 500}),
                serde_json::json!({"target": "screen", "steps": -500}),
            ],
            vr_script: vec![
                serde_json::json!({"direction": "down", "steps": 2048}),
                serde_json::json!({"direction": "up", "steps": 2048}),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SinkConfig {
    Stdout,
    /// Kept only in the notifier's delivery log.
    Memory,
    File { path: PathBuf },
    Webhook { url: String, fallback_path: PathBuf },
}

impl Default for SinkConfig {
    fn default() -> Self {
        SinkConfig::File {
            path: PathBuf::from("notifications.ndjson"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    #[serde(default = "default_orchestrator_bind")]
    pub orchestrator_bind: String,
    #[serde(default = "default_cloud_bind")]
    pub cloud_bind: String,
    #[serde(default = "default_signaling_bind")]
    pub signaling_bind: String,
    pub experiments: Vec<ExperimentConfig>,
    #[serde(default = "default_session_duration")]
    pub session_duration_s: u64,
    #[serde(default = "default_frame_interval")]
    pub frame_interval_ms: Millis,
    #[serde(default)]
    pub latency_profiles: LatencyProfiles,
    #[serde(default)]
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub tester: TesterConfig,
    #[serde(default)]
    pub sink: SinkConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub render: RenderConfig,
    /// Pin journal location; in-memory only when absent.
    #[serde(default)]
    pub journal_path: Option<PathBuf>,
}

fn default_orchestrator_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_cloud_bind() -> String {
    "127.0.0.1:8081".into()
}
fn default_signaling_bind() -> String {
    "127.0.0.1:8082".into()
}
fn default_session_duration() -> u64 {
    300
}
fn default_frame_interval() -> Millis {
    200
}

pub const ENV_ORCHESTRATOR_BIND: &str = "RLABS_ORCHESTRATOR_BIND";
pub const ENV_CLOUD_BIND: &str = "RLABS_CLOUD_BIND";
pub const ENV_SIGNALING_BIND: &str = "RLABS_SIGNALING_BIND";

impl PlatformConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: PlatformConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces bind addresses with any set in the environment.
    pub fn apply_env_overrides(&mut self) {
        self.apply_overrides(|k| std::env::var(k).ok());
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (key, slot) in [
            (ENV_ORCHESTRATOR_BIND, &mut self.orchestrator_bind),
            (ENV_CLOUD_BIND, &mut self.cloud_bind),
            (ENV_SIGNALING_BIND, &mut self.signaling_bind),
        ] {
            if let Some(v) = lookup(key).filter(|v| !v.is_empty()) {
                *slot = v;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut exp_ids = HashSet::new();
        let mut node_ids = HashSet::new();
        let mut device_ids = HashSet::new();
        let mut tokens = HashSet::new();
        if self.session_duration_s == 0 {
            return Err(invalid("session_duration_s", "must be positive"));
        }
        if self.frame_interval_ms == 0 {
            return Err(invalid("frame_interval_ms", "must be positive"));
        }
        for (ei, exp) in self.experiments.iter().enumerate() {
            let at = format!("experiments[{ei}]");
            if exp.id.is_empty() || !exp_ids.insert(exp.id.as_str()) {
                return Err(invalid(format!("{at}.id"), format!("duplicate or empty experiment id {:?}", exp.id)));
            }
            if exp.nodes.is_empty() {
                return Err(invalid(format!("{at}.nodes"), "at least one node is required"));
            }
            if let Some(state) = &exp.physics {
                if state.kind() != exp.kind {
                    return Err(invalid(format!("{at}.physics"), "state kind does not match experiment kind"));
                }
                state
                    .validate()
                    .map_err(|e| invalid(format!("{at}.physics"), e.to_string()))?;
            }
            for (ni, node) in exp.nodes.iter().enumerate() {
                let at = format!("{at}.nodes[{ni}]");
                if node.node_id.is_empty() || !node_ids.insert(node.node_id.as_str()) {
                    return Err(invalid(format!("{at}.node_id"), format!("duplicate or empty node id {:?}", node.node_id)));
                }
                let controls = node.devices.iter().filter(|d| d.role == AgentRole::Control).count();
                if controls != 1 {
                    return Err(invalid(format!("{at}.devices"), format!("expected one control device, found {controls}")));
                }
                for (di, dev) in node.devices.iter().enumerate() {
                    let at = format!("{at}.devices[{di}]");
                    if dev.device_id.is_empty() || !device_ids.insert(dev.device_id.as_str()) {
                        return Err(invalid(format!("{at}.device_id"), format!("duplicate or empty device id {:?}", dev.device_id)));
                    }
                    if dev.token.is_empty() || !tokens.insert(dev.token.as_str()) {
                        return Err(invalid(format!("{at}.token"), format!("duplicate or empty token {:?}", dev.token)));
                    }
                    if dev.secret.is_empty() {
                        return Err(invalid(format!("{at}.secret"), "credentials must not be empty"));
                    }
                    if dev.cameras.is_empty() {
                        return Err(invalid(format!("{at}.cameras"), "at least one camera is required"));
                    }
                    for (ci, cam) in dev.cameras.iter().enumerate() {
                        if self.latency_profiles.get(&cam.profile).is_none() {
                            return Err(invalid(
                                format!("{at}.cameras[{ci}].profile"),
                                format!("unknown camera profile {:?}", cam.profile),
                            ));
                        }
                    }
                }
            }
        }
        if self.tester.interval_s == 0 {
            return Err(invalid("tester.interval_s", "must be positive"));
        }
        if self.tester.readings_per_day == 0 {
            return Err(invalid("tester.readings_per_day", "must be positive"));
        }
        for (field, script, kind) in [
            ("tester.fl_script", &self.tester.fl_script, ExperimentKind::FocalLength),
            ("tester.vr_script", &self.tester.vr_script, ExperimentKind::VanishingRod),
        ] {
            for (i, step) in script.iter().enumerate() {
                InputParams::parse(kind, step).map_err(|e| invalid(format!("{field}[{i}]"), e))?;
            }
        }
        let mut names = HashSet::new();
        for (ui, u) in self.users.iter().chain(std::iter::once(&UserConfig {
            username: self.tester.username.clone(),
            secret: self.tester.secret.clone(),
        })).enumerate() {
            if u.username.is_empty() || u.secret.is_empty() || !names.insert(u.username.as_str().to_owned()) {
                return Err(invalid(format!("users[{ui}]"), format!("duplicate or empty account {:?}", u.username)));
            }
        }
        Ok(())
    }

    pub fn experiment(&self, id: &str) -> Option<&ExperimentConfig> {
        self.experiments.iter().find(|e| e.id == id)
    }

    /// Every account the orchestrator should know, tester included.
    pub fn accounts(&self) -> Vec<UserConfig> {
        let mut all = self.users.clone();
        all.push(UserConfig {
            username: self.tester.username.clone(),
            secret: self.tester.secret.clone(),
        });
        all
    }

    /// Agent settings for one device.
    pub fn agent_config(&self, exp: &ExperimentConfig, node: &NodeConfig, dev: &DeviceConfig) -> AgentConfig {
        let (home_u, home_v) = match exp.initial_state() {
            ExperimentState::FocalLength(b) => (b.u_steps, b.v_steps),
            ExperimentState::VanishingRod(_) => (0, 0),
        };
        let device_hash = dev.device_id.bytes().fold(0u64, |h, b| h.rotate_left(5) ^ b as u64);
        AgentConfig {
            experiment_id: exp.id.clone(),
            node_id: node.node_id.clone(),
            device_id: dev.device_id.clone(),
            secret: dev.secret.clone(),
            device_token: dev.token.clone(),
            role: dev.role,
            cameras: dev.cameras.clone(),
            session_duration_s: self.session_duration_s,
            frame_interval_ms: self.frame_interval_ms,
            home_u_steps: home_u,
            home_v_steps: home_v,
            faults: dev.faults,
            seed: self.seed ^ device_hash,
            render: self.render.clone(),
        }
    }

    /// Mutable access to one device's fault flags.
    pub fn device_mut(&mut self, device_id: &str) -> Option<&mut DeviceConfig> {
        self.experiments
            .iter_mut()
            .flat_map(|e| e.nodes.iter_mut())
            .flat_map(|n| n.devices.iter_mut())
            .find(|d| d.device_id == device_id)
    }

    /// A small fleet: `fl_nodes` focal-length nodes (control camera plus a
    /// stream-only side camera each) and `vr_nodes` vanishing-rod nodes.
    pub fn fleet(fl_nodes: usize, vr_nodes: usize) -> Self {
        let device = |id: String, role, kind| DeviceConfig {
            secret: format!("{id}-secret"),
            token: format!("tok-{id}"),
            cameras: default_cameras(kind, role),
            device_id: id,
            role,
            faults: FaultFlags::default(),
        };
        let mut experiments = Vec::new();
        if fl_nodes > 0 {
            experiments.push(ExperimentConfig {
                id: "FL".into(),
                kind: ExperimentKind::FocalLength,
                title: "Focal length of a convex lens".into(),
                nodes: (1..=fl_nodes)
                    .map(|i| NodeConfig {
                        node_id: format!("fl-{i}"),
                        devices: vec![
                            device(format!("fl-{i}-ctl"), AgentRole::Control, ExperimentKind::FocalLength),
                            device(format!("fl-{i}-side"), AgentRole::StreamOnly, ExperimentKind::FocalLength),
                        ],
                    })
                    .collect(),
                physics: None,
            });
        }
        if vr_nodes > 0 {
            experiments.push(ExperimentConfig {
                id: "VR".into(),
                kind: ExperimentKind::VanishingRod,
                title: "Vanishing rod".into(),
                nodes: (1..=vr_nodes)
                    .map(|i| NodeConfig {
                        node_id: format!("vr-{i}"),
                        devices: vec![device(format!("vr-{i}-ctl"), AgentRole::Control, ExperimentKind::VanishingRod)],
                    })
                    .collect(),
                physics: None,
            });
        }
        PlatformConfig {
            orchestrator_bind: default_orchestrator_bind(),
            cloud_bind: default_cloud_bind(),
            signaling_bind: default_signaling_bind(),
            experiments,
            session_duration_s: default_session_duration(),
            frame_interval_ms: default_frame_interval(),
            latency_profiles: LatencyProfiles::default(),
            users: (1..=8)
                .map(|i| UserConfig {
                    username: format!("student{i}"),
                    secret: format!("pass{i}"),
                })
                .collect(),
            tester: TesterConfig::default(),
            sink: SinkConfig::default(),
            seed: 42,
            render: RenderConfig::default(),
            journal_path: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fleet_validates() {
        PlatformConfig::fleet(1, 1).validate().unwrap();
        PlatformConfig::fleet(3, 2).validate().unwrap();
    }

    #[test]
    fn duplicate_token_names_the_field() {
        let mut cfg = PlatformConfig::fleet(2, 0);
        cfg.experiments[0].nodes[1].devices[0].token = cfg.experiments[0].nodes[0].devices[0].token.clone();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().starts_with("experiments[0].nodes[1].devices[0].token"), "{err}");
    }

    #[test]
    fn unknown_profile_and_missing_camera_are_rejected() {
        let mut cfg = PlatformConfig::fleet(1, 0);
        cfg.experiments[0].nodes[0].devices[0].cameras[0].profile = "webcam".into();
        assert!(cfg.validate().unwrap_err().to_string().contains("profile"));
        let mut cfg = PlatformConfig::fleet(1, 0);
        cfg.experiments[0].nodes[0].devices[1].cameras.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("cameras"));
        let mut cfg = PlatformConfig::fleet(1, 0);
        cfg.experiments[0].nodes[0].devices[1].secret.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("secret"));
    }

    #[test]
    fn env_overrides_bind_addresses() {
        let mut cfg = PlatformConfig::fleet(1, 0);
        cfg.apply_overrides(|k| (k == ENV_CLOUD_BIND).then(|| "0.0.0.0:9999".to_string()));
        assert_eq!(cfg.cloud_bind, "0.0.0.0:9999");
        assert_eq!(cfg.orchestrator_bind, "127.0.0.1:8080");
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let text = r#"{"experiments": [{"id": "VR", "kind": "VR", "nodes": [{"node_id": "vr-1", "devices": [
            {"device_id": "d", "secret": "s", "token": "t", "role": "control",
             "cameras": [{"camera_id": "beakers", "profile": "pi3b"}]}]}]}]}"#;
        let cfg = PlatformConfig::from_json(text).unwrap();
        assert_eq!(cfg.session_duration_s, 300);
        assert_eq!(cfg.tester.interval_s, 28_800);
        assert_eq!(cfg.latency_profiles.get("ipcam"), Some(2010));
    }

    proptest! {
        #[test]
        fn round_trip(fl in 0usize..4, vr in 0usize..4, seed in any::<u64>(), dur in 1u64..10_000, stall in prop::option::of(0.0f64..1.0)) {
            let mut cfg = PlatformConfig::fleet(fl, vr);
            cfg.seed = seed;
            cfg.session_duration_s = dur;
            if let Some(d) = cfg.experiments.first_mut().map(|e| &mut e.nodes[0].devices[0]) {
                d.faults.motor_stall = stall;
            }
            let text = cfg.to_json_pretty();
            let back = PlatformConfig::from_json(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_json_pretty(), text);
        }
    }
}
