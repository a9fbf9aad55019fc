use std::collections::HashSet;

use serde_json::json;

use super::*;
use crate::clock::{Clock, VirtualClock};
use crate::cloud::PinStore;

struct Bench {
    clock: VirtualClock,
    store: Arc<PinStore>,
    orch: Orchestrator,
    cfg: PlatformConfig,
    /// Devices that never answer SESSION_START.
    mute: HashSet<String>,
    /// Messages delivered to devices, in order.
    inbox: Vec<Outbound>,
}

impl Bench {
    fn new(fl_nodes: usize) -> Self {
        let mut cfg = PlatformConfig::fleet(fl_nodes, 1);
        cfg.session_duration_s = 3600;
        let clock = VirtualClock::new();
        let store = Arc::new(PinStore::new(Arc::new(clock.clone())));
        let orch = Orchestrator::new(&cfg, store.clone());
        let mut b = Self {
            clock,
            store,
            orch,
            cfg,
            mute: HashSet::new(),
            inbox: Vec::new(),
        };
        for (exp, dev) in b.devices() {
            b.store.register_device(&format!("tok-{dev}"));
            b.store.heartbeat(&format!("tok-{dev}")).unwrap();
            let (_, out) = b.orch.authorize_device(&exp, &dev, &format!("{dev}-secret"), 0).unwrap();
            b.deliver(out);
        }
        b
    }

    fn devices(&self) -> Vec<(String, String)> {
        self.cfg
            .experiments
            .iter()
            .flat_map(|e| {
                e.nodes
                    .iter()
                    .flat_map(move |n| n.devices.iter().map(move |d| (e.id.clone(), d.device_id.clone())))
            })
            .collect()
    }

    fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    /// Delivers messages; responsive devices ACK every SESSION_START at once.
    fn deliver(&mut self, mut out: Vec<Outbound>) {
        while !out.is_empty() {
            let mut next = Vec::new();
            for o in out {
                if let ChannelMessage::SessionStart { session_id, .. } = &o.msg {
                    if !self.mute.contains(&o.device_id) {
                        next.extend(self.orch.device_message(
                            &o.device_id,
                            ChannelMessage::Ack {
                                session_id: session_id.clone(),
                            },
                            self.now(),
                        ));
                    }
                }
                self.inbox.push(o);
            }
            out = next;
        }
    }

    fn enter(&mut self, user: &str, exp: &str) -> EntryStatus {
        let (_, out) = self.orch.enter(user, exp, &format!("peer-{user}"), self.now()).unwrap();
        self.deliver(out);
        self.orch.status(user, exp, self.now()).unwrap()
    }

    fn leave(&mut self, user: &str, exp: &str) {
        let out = self.orch.leave(user, exp, self.now()).unwrap();
        self.deliver(out);
    }

    fn advance(&mut self, ms: Millis) {
        self.clock.advance_by(ms);
        for (_, dev) in self.devices() {
            self.store.heartbeat(&format!("tok-{dev}")).unwrap();
        }
        let out = self.orch.poll(self.now());
        self.deliver(out);
    }

    fn granted_node(status: &EntryStatus) -> Option<&str> {
        match status {
            EntryStatus::Granted { node_id, .. } => Some(node_id),
            _ => None,
        }
    }
}

#[test]
fn three_nodes_three_users_then_queue() {
    let mut b = Bench::new(3);
    let nodes: Vec<String> = ["u1", "u2", "u3"]
        .iter()
        .map(|u| Bench::granted_node(&b.enter(u, "FL")).unwrap().to_string())
        .collect();
    assert_eq!(nodes, ["fl-1", "fl-2", "fl-3"]);
    assert_eq!(b.enter("u4", "FL"), EntryStatus::Queued { position: 1, token: 4 });
    assert_eq!(b.enter("u4", "FL"), EntryStatus::Queued { position: 1, token: 4 });
    assert_eq!(b.orch.queue_snapshot("FL").unwrap().len(), 1);
    for n in ["fl-1", "fl-2", "fl-3"] {
        let tok = format!("tok-{n}-ctl");
        assert_eq!(b.store.get_pin(&tok, pins::FLAG).unwrap().as_deref(), Some("1"));
    }
}

#[test]
fn occupant_leaving_grants_queue_head_and_shifts_tokens() {
    let mut b = Bench::new(1);
    assert!(matches!(b.enter("u1", "FL"), EntryStatus::Granted { .. }));
    assert_eq!(b.enter("u2", "FL"), EntryStatus::Queued { position: 1, token: 2 });
    assert_eq!(b.enter("u3", "FL"), EntryStatus::Queued { position: 2, token: 3 });
    b.leave("u1", "FL");
    assert!(matches!(b.orch.status("u2", "FL", 0).unwrap(), EntryStatus::Granted { .. }));
    assert_eq!(b.orch.status("u3", "FL", 0).unwrap(), EntryStatus::Queued { position: 1, token: 3 });
    assert_eq!(b.orch.status("u1", "FL", 0).unwrap(), EntryStatus::Idle);
    let ends: Vec<_> = b
        .inbox
        .iter()
        .filter(|o| matches!(o.msg, ChannelMessage::SessionEnd { reason: EndReason::UserLeft, .. }))
        .map(|o| o.device_id.as_str())
        .collect();
    assert_eq!(ends, ["fl-1-ctl", "fl-1-side"]);
}

#[test]
fn queued_user_leaving_shifts_later_positions() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    b.enter("u2", "FL");
    b.enter("u3", "FL");
    b.leave("u2", "FL");
    assert_eq!(b.orch.status("u3", "FL", 0).unwrap(), EntryStatus::Queued { position: 1, token: 3 });
    b.leave("u2", "FL");
}

#[test]
fn timeout_with_empty_queue_leaves_node_vacant() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    let dur = b.cfg.session_duration_s * SECOND;
    b.advance(dur);
    assert!(matches!(b.orch.status("u1", "FL", b.now()).unwrap(), EntryStatus::Granted { .. }));
    b.advance(EXPIRY_GRACE_MS);
    assert_eq!(b.orch.status("u1", "FL", b.now()).unwrap(), EntryStatus::Idle);
    assert_eq!(b.orch.check_availability("FL", "fl-1").unwrap(), Availability::Available);
    assert_eq!(b.store.get_pin("tok-fl-1-ctl", pins::FLAG).unwrap().as_deref(), Some("0"));
}

#[test]
fn missing_ack_marks_node_offline_at_exactly_five_seconds() {
    let mut b = Bench::new(2);
    b.mute.insert("fl-1-side".into());
    assert!(matches!(b.enter("u1", "FL"), EntryStatus::Pending { .. }));
    b.advance(ACK_TIMEOUT_MS - 1);
    assert_eq!(b.orch.nodes("FL").unwrap()[0].status, "probing");
    b.advance(1);
    let nodes = b.orch.nodes("FL").unwrap();
    assert_eq!(nodes[0].status, "offline");
    assert_eq!(nodes[0].availability, Availability::Unavailable { reason: Leg::Stream });
    // the user is moved on to the next node
    assert!(matches!(b.orch.status("u1", "FL", b.now()).unwrap(), EntryStatus::Granted { ref node_id, .. } if node_id == "fl-2"));
    let failed = b
        .orch
        .events()
        .into_iter()
        .find(|e| matches!(e.kind, EventKind::ProbeFailed { .. }))
        .unwrap();
    assert_eq!(failed.ts, ACK_TIMEOUT_MS);
}

#[test]
fn all_nodes_offline_is_distinct_from_queued() {
    let mut b = Bench::new(1);
    b.mute.insert("fl-1-ctl".into());
    assert!(matches!(b.enter("u1", "FL"), EntryStatus::Pending { .. }));
    b.advance(ACK_TIMEOUT_MS);
    assert_eq!(b.orch.status("u1", "FL", b.now()).unwrap(), EntryStatus::Offline);
    assert_eq!(
        b.orch.enter("u2", "FL", "peer-u2", b.now()).unwrap_err(),
        ApiError::ExperimentOffline("FL".into())
    );
    // a reconnecting device clears the offline mark
    b.mute.clear();
    let (_, out) = b.orch.authorize_device("FL", "fl-1-ctl", "fl-1-ctl-secret", b.now()).unwrap();
    b.deliver(out);
    assert!(matches!(b.enter("u2", "FL"), EntryStatus::Granted { .. }));
}

#[test]
fn availability_legs_in_order() {
    let mut b = Bench::new(1);
    assert_eq!(b.orch.check_availability("FL", "fl-1").unwrap(), Availability::Available);
    b.store.update_pin("tok-fl-1-ctl", pins::FLAG, "1").unwrap();
    assert_eq!(
        b.orch.check_availability("FL", "fl-1").unwrap(),
        Availability::Unavailable { reason: Leg::Occupied }
    );
    b.clock.advance_by(crate::cloud::HEARTBEAT_TTL_MS + 1);
    assert_eq!(
        b.orch.check_availability("FL", "fl-1").unwrap(),
        Availability::Unavailable { reason: Leg::Cloud }
    );
    b.advance(0);
    b.store.update_pin("tok-fl-1-ctl", pins::FLAG, "0").unwrap();
    b.orch.device_disconnected("fl-1-side", b.now());
    assert_eq!(
        b.orch.check_availability("FL", "fl-1").unwrap(),
        Availability::Unavailable { reason: Leg::Stream }
    );
}

#[test]
fn input_is_owner_only_and_validated() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    b.enter("u2", "FL");
    let ok = b.orch.submit_input("u1", "FL", &json!({"target": "screen", "steps": 500}), 0).unwrap();
    assert_eq!(ok.len(), 1);
    assert_eq!(ok[0].device_id, "fl-1-ctl");
    assert_eq!(
        b.store.get_pin("tok-fl-1-ctl", pins::INPUT).unwrap().as_deref(),
        Some(r#"{"target":"screen","steps":500}"#)
    );
    assert!(matches!(
        b.orch.submit_input("u2", "FL", &json!({"target": "screen", "steps": 500}), 0),
        Err(ApiError::Forbidden(_))
    ));
    let bad = b.orch.submit_input("u1", "FL", &json!({"target": "screen", "steps": "x"}), 0).unwrap_err();
    assert_eq!(bad.http_status(), 400);
    assert!(matches!(b.orch.output("u2", "FL"), Err(ApiError::Forbidden(_))));
    let snap = b.orch.output("u1", "FL").unwrap();
    assert_eq!(snap.pins["V2"], json!(1.0));
    assert_eq!(snap.cameras, ["fl-1/screen", "fl-1/side"]);
}

#[test]
fn one_experiment_per_user() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    assert!(matches!(b.orch.enter("u1", "VR", "p", 0), Err(ApiError::Conflict(_))));
    b.leave("u1", "FL");
    assert!(matches!(b.enter("u1", "VR"), EntryStatus::Granted { .. }));
}

#[test]
fn device_drop_ends_session() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    let out = b.orch.device_disconnected("fl-1-side", 10);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].device_id, "fl-1-ctl");
    assert!(matches!(out[0].msg, ChannelMessage::SessionEnd { reason: EndReason::Disconnected, .. }));
    assert_eq!(b.orch.status("u1", "FL", 10).unwrap(), EntryStatus::Idle);
}

#[test]
fn stale_ack_is_cancelled() {
    let b = Bench::new(1);
    let out = b.orch.device_message("fl-1-ctl", ChannelMessage::Ack { session_id: "s-99".into() }, 0);
    assert_eq!(
        out[0].msg,
        ChannelMessage::SessionEnd {
            session_id: "s-99".into(),
            reason: EndReason::Cancelled
        }
    );
}

#[test]
fn device_auth_checks_secret_and_experiment() {
    let b = Bench::new(1);
    assert!(b.orch.authorize_device("FL", "fl-1-ctl", "wrong", 0).is_err());
    assert!(b.orch.authorize_device("VR", "fl-1-ctl", "fl-1-ctl-secret", 0).is_err());
    assert!(b.orch.authorize_device("FL", "ghost", "x", 0).is_err());
    assert_eq!(b.orch.authorize_device("FL", "fl-1-ctl", "fl-1-ctl-secret", 0).unwrap().0, "fl-1");
}

#[test]
fn idle_queue_entries_expire() {
    let mut b = Bench::new(1);
    b.enter("u1", "FL");
    b.enter("u2", "FL");
    b.enter("u3", "FL");
    b.advance(10 * MINUTE);
    b.orch.status("u3", "FL", b.now()).unwrap();
    b.advance(20 * MINUTE);
    assert_eq!(b.orch.status("u2", "FL", b.now()).unwrap(), EntryStatus::Idle);
    assert_eq!(b.orch.status("u3", "FL", b.now()).unwrap(), EntryStatus::Queued { position: 1, token: 3 });
}

#[test]
fn reservation_holder_promoted_at_slot_start() {
    let mut b = Bench::new(1);
    b.orch.book("u3", "FL", SLOT_MS, 2 * SLOT_MS, 0).unwrap();
    assert!(matches!(b.orch.book("u9", "FL", SLOT_MS, 2 * SLOT_MS, 0), Err(ApiError::SlotTaken { next_free }) if next_free == 2 * SLOT_MS));
    b.enter("u1", "FL");
    b.enter("u2", "FL");
    b.enter("u3", "FL");
    b.advance(SLOT_MS - 1);
    b.orch.status("u2", "FL", b.now()).unwrap();
    b.orch.status("u3", "FL", b.now()).unwrap();
    b.advance(1);
    assert_eq!(b.orch.status("u3", "FL", b.now()).unwrap(), EntryStatus::Queued { position: 1, token: 3 });
    assert_eq!(b.orch.status("u2", "FL", b.now()).unwrap(), EntryStatus::Queued { position: 2, token: 2 });
}

#[test]
fn logout_revokes_token() {
    let b = Bench::new(1);
    let t = b.orch.login("student1", "pass1").unwrap();
    assert_eq!(b.orch.authenticate(&t).unwrap(), "student1");
    b.orch.logout(&t);
    assert_eq!(b.orch.authenticate(&t), Err(ApiError::Unauthorized));
    assert_eq!(b.orch.login("student1", "bad"), Err(ApiError::Unauthorized));
}

#[test]
fn catalog_counts() {
    let mut b = Bench::new(3);
    b.enter("u1", "FL");
    let cat = b.orch.catalog();
    let fl = cat.iter().find(|c| c.id == "FL").unwrap();
    assert_eq!((fl.nodes, fl.available, fl.busy, fl.offline), (3, 2, 1, 0));
}

#[test]
fn session_log_is_ndjson() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.ndjson");
    let cfg = PlatformConfig::fleet(1, 0);
    let clock = VirtualClock::new();
    let store = Arc::new(PinStore::new(Arc::new(clock)));
    let orch = Orchestrator::new(&cfg, store).with_session_log(&path).unwrap();
    orch.authorize_device("FL", "fl-1-ctl", "fl-1-ctl-secret", 0).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let ev: OrchEvent = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(ev.kind, EventKind::DeviceAuthorized { device_id: "fl-1-ctl".into(), node_id: "fl-1".into() });
}
