//! Randomized entry/leave storms against one experiment's node pool with
//! scripted devices, checking exclusivity, queue order and conservation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlabs_core::clock::{Clock, Millis, VirtualClock};
use rlabs_core::cloud::{CloudApi, PinStore};
use rlabs_core::config::PlatformConfig;
use rlabs_core::orchestrator::{EntryStatus, EventKind, Orchestrator, Outbound};
use rlabs_core::protocol::ChannelMessage;

#[derive(Debug, Clone, Copy)]
pub struct StormSpec {
    pub seed: u64,
    pub users: usize,
    pub nodes: usize,
    pub ops: usize,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct StormStats {
    pub arrivals: usize,
    pub grants: usize,
    pub offers: usize,
}

pub fn run_storm(spec: StormSpec) -> Result<StormStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cfg = PlatformConfig::fleet(spec.nodes, 0);
    cfg.session_duration_s = 60;
    let clock = VirtualClock::new();
    let store = Arc::new(PinStore::new(Arc::new(clock.clone())));
    let orch = Orchestrator::new(&cfg, store.clone());
    let devices: Vec<String> = cfg.experiments[0]
        .nodes
        .iter()
        .flat_map(|n| n.devices.iter().map(|d| d.device_id.clone()))
        .collect();
    let beat = |store: &PinStore| {
        for d in &devices {
            store.heartbeat(&format!("tok-{d}")).unwrap();
        }
    };
    for d in &devices {
        store.register_device(&format!("tok-{d}"));
    }
    beat(&store);
    // (due, device, session)
    let mut pending_acks: Vec<(Millis, String, String)> = Vec::new();
    let schedule = |out: Vec<Outbound>, now: Millis, rng: &mut ChaCha8Rng, acks: &mut Vec<(Millis, String, String)>| {
        for o in out {
            if let ChannelMessage::SessionStart { session_id, .. } = o.msg {
                // mostly prompt, sometimes past the ack window
                let delay = if rng.random_bool(0.03) { 5_000 + rng.random_range(0..500) } else { rng.random_range(0..800) };
                acks.push((now + delay, o.device_id, session_id));
            }
        }
    };
    for d in &devices {
        let (_, out) = orch
            .authorize_device("FL", d, &format!("{d}-secret"), 0)
            .map_err(|e| format!("auth {d}: {e}"))?;
        schedule(out, 0, &mut rng, &mut pending_acks);
    }

    let mut seen_events = 0;
    let mut holder: BTreeMap<String, String> = BTreeMap::new();
    let mut last_offered: u64 = 0;
    let mut offered: HashSet<u64> = HashSet::new();
    let mut stats = StormStats::default();
    let mut departed = 0usize;

    for step in 0..spec.ops {
        let now = clock.now_ms();
        let user = format!("user{}", rng.random_range(0..spec.users));
        match rng.random_range(0..10) {
            0..=4 => {
                if let Ok((_, out)) = orch.enter(&user, "FL", &format!("peer-{user}"), now) {
                    schedule(out, now, &mut rng, &mut pending_acks);
                }
            }
            5..=6 => {
                let out = orch.leave(&user, "FL", now).map_err(|e| e.to_string())?;
                schedule(out, now, &mut rng, &mut pending_acks);
            }
            7 => {
                // devices occasionally drop and come back
                if rng.random_bool(0.1) {
                    let d = &devices[rng.random_range(0..devices.len())];
                    let out = orch.device_disconnected(d, now);
                    schedule(out, now, &mut rng, &mut pending_acks);
                    let (_, out) = orch
                        .authorize_device("FL", d, &format!("{d}-secret"), now)
                        .map_err(|e| format!("re-auth {d}: {e}"))?;
                    schedule(out, now, &mut rng, &mut pending_acks);
                }
            }
            _ => {
                clock.advance_by(rng.random_range(1..2_000));
                beat(&store);
                let now = clock.now_ms();
                pending_acks.sort();
                let due: Vec<_> = pending_acks.iter().filter(|a| a.0 <= now).cloned().collect();
                pending_acks.retain(|a| a.0 > now);
                for (at, device, session_id) in due {
                    let out = orch.device_message(&device, ChannelMessage::Ack { session_id }, at.max(now));
                    schedule(out, now, &mut rng, &mut pending_acks);
                }
                let out = orch.poll(now);
                schedule(out, now, &mut rng, &mut pending_acks);
            }
        }

        let events = orch.events_since(seen_events);
        seen_events += events.len();
        for ev in events {
            match ev.kind {
                EventKind::Queued { .. } => stats.arrivals += 1,
                EventKind::ProbeStarted { token, .. } => {
                    stats.offers += 1;
                    if offered.insert(token) {
                        if token < last_offered {
                            return Err(format!("step {step}: token {token} offered after {last_offered}"));
                        }
                        last_offered = token;
                    }
                }
                EventKind::Granted { node_id, user, .. } => {
                    stats.grants += 1;
                    if let Some(prev) = holder.insert(node_id.clone(), user.clone()) {
                        return Err(format!("step {step}: {node_id} granted to {user} while held by {prev}"));
                    }
                }
                EventKind::SessionEnded { node_id, user, .. } => {
                    departed += 1;
                    if holder.remove(&node_id).as_deref() != Some(user.as_str()) {
                        return Err(format!("step {step}: {node_id} released by non-holder {user}"));
                    }
                }
                EventKind::Dequeued { .. } | EventKind::ProbeCancelled { .. } => departed += 1,
                _ => {}
            }
        }

        let sessions = orch.sessions("FL").map_err(|e| e.to_string())?;
        let mut by_node = HashMap::new();
        let mut users_seen = HashSet::new();
        for s in &sessions {
            if by_node.insert(s.node_id.clone(), s.user.clone()).is_some() {
                return Err(format!("step {step}: two sessions on {}", s.node_id));
            }
            users_seen.insert(s.user.clone());
        }
        let queue = orch.queue_snapshot("FL").map_err(|e| e.to_string())?;
        if !queue.windows(2).all(|w| w[0].token < w[1].token) {
            return Err(format!("step {step}: queue reordered"));
        }
        for (i, e) in queue.iter().enumerate() {
            if !users_seen.insert(e.user.clone()) {
                return Err(format!("step {step}: {} both queued and seated", e.user));
            }
            match orch.status(&e.user, "FL", now).map_err(|e| e.to_string())? {
                EntryStatus::Queued { position, token } if position == i + 1 && token == e.token => {}
                other => return Err(format!("step {step}: {} at index {i} reports {other:?}", e.user)),
            }
        }
        let probing = orch
            .nodes("FL")
            .map_err(|e| e.to_string())?
            .iter()
            .filter(|n| n.status == "probing")
            .count();
        if stats.arrivals != queue.len() + probing + sessions.len() + departed {
            return Err(format!(
                "step {step}: {} arrivals but {} queued + {probing} pending + {} seated + {departed} departed",
                stats.arrivals,
                queue.len(),
                sessions.len()
            ));
        }
        for s in &sessions {
            let flag = store.get_pin(&format!("tok-{}-ctl", s.node_id), "V2").unwrap();
            if flag.as_deref() != Some("1") {
                return Err(format!("step {step}: {} occupied but flag {flag:?}", s.node_id));
            }
        }
    }
    Ok(stats)
}
