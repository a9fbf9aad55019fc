mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::{config, full_stack, get, login, post};
use rlabs_core::config::SinkConfig;
use rlabs_core::orchestrator::EventKind;
use rlabs_core::protocol::ChannelMessage;
use rlabs_core::tester::{load_ledger, read_notifications, FailReason, LabClient, Notifier, Tester};
use rlabs_server::agents::connect_ws;
use rlabs_server::{spawn_fleet, AgentEndpoints, AgentExit, FleetOptions, HttpLabClient};
use serde_json::json;
use tungstenite::Message;

#[test]
fn full_stack_agents_reach_idle() {
    let dir = tempfile::tempdir().unwrap();
    let l = full_stack(&config(1, 1, dir.path()));
    let events = l.events();
    let ready: BTreeSet<String> = events
        .iter()
        .filter(|e| e["event"] == "ready" && e["role"] == "agent")
        .map(|e| e["device_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ready, BTreeSet::from(["fl-1-ctl".into(), "fl-1-side".into(), "vr-1-ctl".into()]));
    assert!(events.iter().any(|e| e["role"] == "agents" && e["count"] == 3));
    for role in ["cloud", "signaling", "orchestrator"] {
        assert!(events.iter().any(|e| e["event"] == "ready" && e["role"] == role), "{role}");
    }
    assert_eq!(l.stack.hub().unwrap().connected(), ["fl-1-ctl", "fl-1-side", "vr-1-ctl"]);
    // heartbeats reach the cloud, so every node is on offer
    std::thread::sleep(Duration::from_millis(300));
    let token = login(&l.orchestrator(), "student1", "pass1");
    let (status, cat) = get(&format!("http://{}/api/experiments", l.orchestrator()), Some(&token));
    assert_eq!(status, 200, "{cat}");
    assert_eq!(cat["experiments"].as_array().unwrap().len(), 2);
    let (_, nodes) = get(&format!("http://{}/api/experiments/FL/nodes", l.orchestrator()), Some(&token));
    assert_eq!(nodes["nodes"][0]["status"], "vacant");
}

#[test]
fn user_session_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let l = full_stack(&config(1, 0, dir.path()));
    let orch = l.orchestrator();
    let api = |p: &str| format!("http://{orch}/api/experiments/FL/{p}");

    assert_eq!(get(&format!("http://{orch}/api/experiments"), None).0, 401);
    let (status, body) = post(&format!("http://{orch}/api/login"), None, json!({"username": "student1", "secret": "bad"}));
    assert_eq!((status, body["error"].as_str()), (401, Some("unauthorized")));

    let mut client = HttpLabClient::new(&orch, &l.signaling());
    let token = client.login("student1", "pass1").unwrap();
    client.register_peer("ui-1").unwrap();
    let (status, granted) = post(&api("enter"), Some(&token), json!({"peer_id": "ui-1"}));
    assert_eq!(status, 200, "{granted}");
    assert_eq!(granted["status"], "granted");
    assert_eq!(granted["node_id"], "fl-1");
    assert!(granted["expires_at"].as_str().unwrap().ends_with('Z'));

    // both cameras of the node stream to the user
    let until = Instant::now() + Duration::from_secs(5);
    let mut cameras = BTreeSet::new();
    while cameras.len() < 2 && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(100));
        cameras.extend(client.take_received("ui-1").into_iter().map(|f| f.frame.camera_id));
    }
    assert_eq!(cameras.len(), 2, "{cameras:?}");
    assert!(cameras.contains("fl-1/side"));

    let (_, before) = get(&api("output"), Some(&token));
    assert_eq!(before["pins"]["V2"], json!(1.0), "{before}");
    let screen_before = before["pins"]["V1"].as_f64().unwrap();
    assert_eq!(post(&api("input"), Some(&token), json!({"target": "screen", "steps": 500})).0, 200);
    let (status, bad) = post(&api("input"), Some(&token), json!({"target": "screen", "steps": "x"}));
    assert_eq!((status, bad["error"].as_str()), (400, Some("bad_request")));
    let until = Instant::now() + Duration::from_secs(10);
    let mut moved = 0.0;
    while Instant::now() < until {
        let (_, out) = get(&api("output"), Some(&token));
        moved = out["pins"]["V1"].as_f64().unwrap() - screen_before;
        if moved > 0.0 {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    assert!((moved - 0.5).abs() < 1e-6, "screen moved {moved} cm");

    let (_, queue) = get(&api("queue"), Some(&token));
    assert_eq!(queue["status"], "granted");
    assert_eq!(post(&api("leave"), Some(&token), json!({})).0, 200);
    let (_, queue) = get(&api("queue"), Some(&token));
    assert_eq!(queue["status"], "idle");

    let (status, slot) = post(
        &api("book"),
        Some(&token),
        json!({"start": "2099-01-01T10:00:00Z", "end": "2099-01-01T10:30:00Z"}),
    );
    assert_eq!(status, 200, "{slot}");
    let (status, _) = post(&api("book"), Some(&token), json!({"start": "soon", "end": "later"}));
    assert_eq!(status, 400);
    client.unregister_peer("ui-1");
}

#[test]
fn second_user_queues_then_gets_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let l = full_stack(&config(1, 0, dir.path()));
    let orch = l.orchestrator();
    let enter = format!("http://{orch}/api/experiments/FL/enter");
    let a = login(&orch, "student1", "pass1");
    let b = login(&orch, "student2", "pass2");
    post(&format!("http://{}/peer/register", l.signaling()), None, json!({"peer_id": "pa"}));
    post(&format!("http://{}/peer/register", l.signaling()), None, json!({"peer_id": "pb"}));
    assert_eq!(post(&enter, Some(&a), json!({"peer_id": "pa"})).1["status"], "granted");
    let queued = post(&enter, Some(&b), json!({"peer_id": "pb"})).1;
    assert_eq!(queued["status"], "queued");
    assert_eq!(queued["position"], 1);
    post(&format!("http://{orch}/api/experiments/FL/leave"), Some(&a), json!({}));
    let until = Instant::now() + Duration::from_secs(8);
    let mut status = json!(null);
    while Instant::now() < until {
        status = get(&format!("http://{orch}/api/experiments/FL/queue"), Some(&b)).1;
        if status["status"] == "granted" {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert_eq!(status["status"], "granted", "{status}");
}

#[test]
fn device_channel_rejects_bad_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let l = full_stack(&config(1, 0, dir.path()));
    let mut ws = connect_ws(&l.orchestrator(), "/device/channel", Duration::from_secs(2), Duration::from_secs(2)).unwrap();
    let auth = ChannelMessage::Auth {
        experiment_id: "FL".into(),
        device_id: "fl-1-ctl".into(),
        secret: "wrong".into(),
    };
    ws.send(Message::text(auth.to_json())).unwrap();
    let Message::Text(reply) = ws.read().unwrap() else {
        panic!("text reply expected");
    };
    assert_eq!(ChannelMessage::from_json(&reply).unwrap().type_name(), "AUTH_FAIL");
    // the genuine agent keeps its channel
    assert!(l.stack.hub().unwrap().connected().contains(&"fl-1-ctl".to_string()));
}

#[test]
fn healthy_check_over_http_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, 0, dir.path());
    let l = full_stack(&cfg);
    std::thread::sleep(Duration::from_millis(300));
    let tester = Tester::new(&cfg).with_notifier(Notifier::new(SinkConfig::Memory));
    let mut client = HttpLabClient::new(&l.orchestrator(), &l.signaling());
    let r = tester.run_check(&mut client, "FL");
    assert!(r.passed(), "{}", serde_json::to_string_pretty(&r).unwrap());
    assert_eq!(r.node_id.as_deref(), Some("fl-1"));
    assert!(r.first_frame_ms.unwrap() >= 860);
    assert_eq!(tester.notifier().unwrap().delivered(), 0);
}

#[test]
fn stalled_motor_over_http_fails_with_one_notification() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(1, 0, dir.path());
    cfg.device_mut("fl-1-ctl").unwrap().faults.motor_stall = Some(0.4);
    let l = full_stack(&cfg);
    std::thread::sleep(Duration::from_millis(300));
    let tester = rlabs_server::configured_tester(&cfg);
    let mut client = HttpLabClient::new(&l.orchestrator(), &l.signaling());
    let r = tester.run_check(&mut client, "FL");
    assert_eq!(r.overall.reasons(), [FailReason::Motion]);
    let notes = read_notifications(&dir.path().join("notifications.ndjson")).unwrap();
    assert_eq!(notes.len(), 1);
    assert_eq!(notes[0].reasons, ["motion"]);
    assert_eq!(load_ledger(&dir.path().join("ledger.ndjson")).unwrap(), [r]);
}

#[test]
fn unanswered_probe_moves_user_to_next_node() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 0, dir.path());
    cfg.device_mut("fl-1-side").unwrap().faults.busy_no_ack = true;
    let l = full_stack(&cfg);
    std::thread::sleep(Duration::from_millis(300));
    let orch = l.orchestrator();
    let token = login(&orch, "student1", "pass1");
    post(&format!("http://{}/peer/register", l.signaling()), None, json!({"peer_id": "p1"}));
    let started = Instant::now();
    let (status, v) = post(&format!("http://{orch}/api/experiments/FL/enter"), Some(&token), json!({"peer_id": "p1"}));
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["status"], "granted", "{v}");
    assert_eq!(v["node_id"], "fl-2");
    assert!(started.elapsed() >= Duration::from_secs(5));
    let events = l.stack.orchestrator().unwrap().events();
    let probe = |pred: &dyn Fn(&EventKind) -> bool| events.iter().find(|e| pred(&e.kind)).map(|e| e.ts).unwrap();
    let t0 = probe(&|k| matches!(k, EventKind::ProbeStarted { node_id, .. } if node_id == "fl-1"));
    let t1 = probe(&|k| matches!(k, EventKind::ProbeFailed { node_id, .. } if node_id == "fl-1"));
    // the driver notices the deadline on its next tick
    assert!((5_000..5_050).contains(&(t1 - t0)), "probe failed after {} ms", t1 - t0);
    let (_, nodes) = get(&format!("http://{orch}/api/experiments/FL/nodes"), Some(&token));
    assert_eq!(nodes["nodes"][0]["status"], "offline");
}

#[test]
fn agents_give_up_without_orchestrator() {
    // a port nothing listens on
    let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, 0, dir.path());
    let endpoints = AgentEndpoints {
        orchestrator: free.clone(),
        cloud: free.clone(),
        signaling: free,
    };
    let notices = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let sink = notices.clone();
    let fleet = spawn_fleet(
        &cfg,
        &endpoints,
        FleetOptions {
            max_attempts: 3,
            connect_timeout: Duration::from_millis(200),
        },
        std::sync::Arc::new(move |n| sink.lock().unwrap().push(n)),
    );
    let until = Instant::now() + Duration::from_secs(20);
    while !fleet.is_finished() && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(50));
    }
    let exits = fleet.join();
    assert_eq!(exits.len(), 2);
    assert!(exits.iter().all(|(_, e)| *e == AgentExit::GaveUp { attempts: 3 }), "{exits:?}");
    let retries = notices
        .lock()
        .unwrap()
        .iter()
        .filter(|n| matches!(n, rlabs_server::AgentNotice::Disconnected { .. }))
        .count();
    assert_eq!(retries, 6);
}

#[test]
fn scheduled_tester_waits_for_local_agents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, 1, dir.path());
    let l = common::launch(&cfg, &rlabs_server::Role::ALL);
    let until = Instant::now() + Duration::from_secs(30);
    let checks = loop {
        let checks: Vec<_> = l.events().into_iter().filter(|e| e["event"] == "check").collect();
        if checks.len() == 2 || Instant::now() > until {
            break checks;
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(checks.len(), 2, "{:?}", l.events());
    assert!(checks.iter().all(|c| c["passed"] == true), "{checks:?}");
    let readings = load_ledger(&cfg.tester.ledger_path).unwrap();
    assert_eq!(readings.len(), 2);
    assert!(readings.iter().all(|r| r.passed() && !r.hardware_down));
}
