#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rlabs_core::config::{PlatformConfig, SinkConfig};
use rlabs_server::{FleetOptions, LaunchOptions, Role, Stack};
use serde_json::{json, Value};

/// A fleet config bound to ephemeral ports, writing under `dir`.
pub fn config(fl: usize, vr: usize, dir: &std::path::Path) -> PlatformConfig {
    let mut cfg = PlatformConfig::fleet(fl, vr);
    cfg.orchestrator_bind = "127.0.0.1:0".into();
    cfg.cloud_bind = "127.0.0.1:0".into();
    cfg.signaling_bind = "127.0.0.1:0".into();
    cfg.tester.ledger_path = dir.join("ledger.ndjson");
    cfg.tester.retry_backoff_ms = 1_000;
    cfg.sink = SinkConfig::File {
        path: dir.join("notifications.ndjson"),
    };
    cfg
}

pub struct Launched {
    pub stack: Stack,
    pub events: Arc<Mutex<Vec<Value>>>,
}

impl Launched {
    pub fn events(&self) -> Vec<Value> {
        self.events.lock().unwrap().clone()
    }

    pub fn orchestrator(&self) -> String {
        self.stack.endpoints().orchestrator.clone()
    }

    pub fn signaling(&self) -> String {
        self.stack.endpoints().signaling.clone()
    }

    pub fn cloud(&self) -> String {
        self.stack.endpoints().cloud.clone()
    }
}

pub fn launch(cfg: &PlatformConfig, roles: &[Role]) -> Launched {
    let events = Arc::new(Mutex::new(Vec::new()));
    let sink = events.clone();
    let stack = Stack::launch(
        cfg,
        roles,
        LaunchOptions {
            agents: FleetOptions {
                max_attempts: 5,
                connect_timeout: Duration::from_secs(1),
            },
            tester_interval_ms: None,
            events: Arc::new(move |v| sink.lock().unwrap().push(v)),
        },
    )
    .expect("stack launches");
    Launched { stack, events }
}

/// Services plus agents, with every agent authorized.
pub fn full_stack(cfg: &PlatformConfig) -> Launched {
    let l = launch(cfg, &[Role::Cloud, Role::Signaling, Role::Orchestrator, Role::Agents]);
    assert!(l.stack.wait_agents_ready(Duration::from_secs(10)), "agents never authorized: {:?}", l.events());
    l
}

pub fn http() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(15)))
        .build()
        .into()
}

/// Status and JSON body.
pub fn get(url: &str, token: Option<&str>) -> (u16, Value) {
    let mut req = http().get(url);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    read(req.call().expect("request sent"))
}

pub fn post(url: &str, token: Option<&str>, body: Value) -> (u16, Value) {
    let mut req = http().post(url);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    read(req.send_json(body).expect("request sent"))
}

fn read(mut resp: ureq::http::Response<ureq::Body>) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(json!(text)))
}

pub fn login(orch: &str, user: &str, secret: &str) -> String {
    let (status, v) = post(&format!("http://{orch}/api/login"), None, json!({ "username": user, "secret": secret }));
    assert_eq!(status, 200, "{v}");
    v["token"].as_str().unwrap().to_string()
}
