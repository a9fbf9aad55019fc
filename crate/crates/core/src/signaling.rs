//! Peer registry, call brokerage and a timed in-process media transport.
//!
//! The broker never sleeps. Frames are stamped with a due time when they are
//! published and moved into the callee's inbox by [`Broker::pump`]; drivers
//! call `pump` at [`Broker::next_due`] on either a virtual or a wall clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::image::Frame;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SignalError {
    #[error("peer id must not be empty")]
    EmptyPeerId,
    #[error("peer {0} is already registered")]
    Conflict(String),
    #[error("no such peer {0}")]
    NoSuchPeer(String),
    #[error("no such session {0}")]
    NoSuchSession(u64),
    #[error("session {0} has ended")]
    StaleSession(u64),
    #[error("unknown camera profile {0}")]
    UnknownProfile(String),
    #[error("signaling unreachable: {0}")]
    Transport(String),
}

/// Named one-way latency presets, in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyProfiles(pub BTreeMap<String, Millis>);

impl Default for LatencyProfiles {
    fn default() -> Self {
        Self(BTreeMap::from([
            ("pi3b".to_string(), 350),
            ("pizero2w".to_string(), 860),
            ("ipcam".to_string(), 2010),
        ]))
    }
}

impl LatencyProfiles {
    pub fn get(&self, profile: &str) -> Option<Millis> {
        self.0.get(profile).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Offered,
    Active,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaSession {
    pub session_id: u64,
    pub caller: String,
    pub callee: String,
    pub latency_ms: Millis,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub state: SessionState,
    pub end_reason: Option<String>,
}

/// Something waiting in a peer's inbox.
#[derive(Debug, Clone, PartialEq)]
pub enum InboxItem {
    Frame(DeliveredFrame),
    Hangup { session_id: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveredFrame {
    pub session_id: u64,
    pub caller: String,
    pub seq: u64,
    pub sent_at: Millis,
    pub delivered_at: Millis,
    pub frame: Frame,
}

/// Broker operations a streaming device needs.
pub trait MediaApi: Send + Sync {
    fn register(&self, peer_id: &str, now: Millis) -> Result<(), SignalError>;
    fn unregister(&self, peer_id: &str, now: Millis);
    fn call(&self, caller: &str, callee: &str, profile: &str, now: Millis) -> Result<u64, SignalError>;
    fn publish_frame(&self, session_id: u64, frame: Frame, now: Millis) -> Result<u64, SignalError>;
    fn hangup(&self, session_id: u64, reason: &str, now: Millis) -> Result<(), SignalError>;
}

impl<T: MediaApi + ?Sized> MediaApi for Arc<T> {
    fn register(&self, peer_id: &str, now: Millis) -> Result<(), SignalError> {
        (**self).register(peer_id, now)
    }
    fn unregister(&self, peer_id: &str, now: Millis) {
        (**self).unregister(peer_id, now)
    }
    fn call(&self, caller: &str, callee: &str, profile: &str, now: Millis) -> Result<u64, SignalError> {
        (**self).call(caller, callee, profile, now)
    }
    fn publish_frame(&self, session_id: u64, frame: Frame, now: Millis) -> Result<u64, SignalError> {
        (**self).publish_frame(session_id, frame, now)
    }
    fn hangup(&self, session_id: u64, reason: &str, now: Millis) -> Result<(), SignalError> {
        (**self).hangup(session_id, reason, now)
    }
}

#[derive(Debug)]
struct PeerRecord {
    registered_at: Millis,
    inbox: VecDeque<InboxItem>,
}

#[derive(Debug)]
struct InFlight {
    session_id: u64,
    seq: u64,
    sent_at: Millis,
    frame: Frame,
}

#[derive(Debug, Default)]
struct Inner {
    peers: HashMap<String, PeerRecord>,
    sessions: BTreeMap<u64, MediaSession>,
    next_session: u64,
    next_order: u64,
    // keyed by (due, publish order) so equal due times keep publish order
    in_flight: BinaryHeap<Reverse<(Millis, u64)>>,
    payloads: HashMap<u64, InFlight>,
}

impl Inner {
    fn end_session(&mut self, session_id: u64, reason: &str) {
        let Some(session) = self.sessions.get_mut(&session_id) else {
            return;
        };
        if session.state == SessionState::Ended {
            return;
        }
        session.state = SessionState::Ended;
        session.end_reason = Some(reason.to_string());
        let callee = session.callee.clone();
        self.payloads.retain(|_, p| p.session_id != session_id);
        if let Some(peer) = self.peers.get_mut(&callee) {
            peer.inbox.push_back(InboxItem::Hangup {
                session_id,
                reason: reason.to_string(),
            });
        }
    }
}

#[derive(Debug, Default)]
pub struct Broker {
    profiles: LatencyProfiles,
    inner: Mutex<Inner>,
}

impl Broker {
    pub fn new(profiles: LatencyProfiles) -> Self {
        Self {
            profiles,
            inner: Mutex::new(Inner {
                next_session: 1,
                ..Default::default()
            }),
        }
    }

    pub fn profiles(&self) -> &LatencyProfiles {
        &self.profiles
    }

    pub fn is_registered(&self, peer_id: &str) -> bool {
        self.inner.lock().unwrap().peers.contains_key(peer_id)
    }

    pub fn registered_at(&self, peer_id: &str) -> Option<Millis> {
        self.inner.lock().unwrap().peers.get(peer_id).map(|p| p.registered_at)
    }

    pub fn peer_count(&self) -> usize {
        self.inner.lock().unwrap().peers.len()
    }

    /// Places a call with an explicit one-way latency. The callee accepts
    /// immediately, so the session is returned already active.
    pub fn call_with_latency(
        &self,
        caller: &str,
        callee: &str,
        latency_ms: Millis,
        _now: Millis,
    ) -> Result<MediaSession, SignalError> {
        let mut inner = self.inner.lock().unwrap();
        for peer in [caller, callee] {
            if !inner.peers.contains_key(peer) {
                return Err(SignalError::NoSuchPeer(peer.to_string()));
            }
        }
        let session_id = inner.next_session;
        inner.next_session += 1;
        let mut session = MediaSession {
            session_id,
            caller: caller.to_string(),
            callee: callee.to_string(),
            latency_ms,
            frames_sent: 0,
            frames_delivered: 0,
            state: SessionState::Offered,
            end_reason: None,
        };
        session.state = SessionState::Active;
        inner.sessions.insert(session_id, session.clone());
        Ok(session)
    }

    pub fn session(&self, session_id: u64) -> Option<MediaSession> {
        self.inner.lock().unwrap().sessions.get(&session_id).cloned()
    }

    pub fn sessions_for(&self, peer_id: &str) -> Vec<MediaSession> {
        self.inner
            .lock()
            .unwrap()
            .sessions
            .values()
            .filter(|s| s.caller == peer_id || s.callee == peer_id)
            .cloned()
            .collect()
    }

    /// Earliest pending delivery time.
    pub fn next_due(&self) -> Option<Millis> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            let Reverse((due, order)) = *inner.in_flight.peek()?;
            if inner.payloads.contains_key(&order) {
                return Some(due);
            }
            // discarded at teardown
            inner.in_flight.pop();
        }
    }

    /// Delivers every frame due at or before `now`. Returns the callees that
    /// received something.
    pub fn pump(&self, now: Millis) -> Vec<String> {
        let mut inner = self.inner.lock().unwrap();
        let mut touched = Vec::new();
        while let Some(&Reverse((due, order))) = inner.in_flight.peek() {
            if due > now {
                break;
            }
            inner.in_flight.pop();
            let Some(item) = inner.payloads.remove(&order) else {
                continue;
            };
            let Some(session) = inner.sessions.get_mut(&item.session_id) else {
                continue;
            };
            session.frames_delivered += 1;
            let callee = session.callee.clone();
            let caller = session.caller.clone();
            if let Some(peer) = inner.peers.get_mut(&callee) {
                peer.inbox.push_back(InboxItem::Frame(DeliveredFrame {
                    session_id: item.session_id,
                    caller,
                    seq: item.seq,
                    sent_at: item.sent_at,
                    delivered_at: now,
                    frame: item.frame,
                }));
                if !touched.contains(&callee) {
                    touched.push(callee);
                }
            }
        }
        touched
    }

    pub fn take_inbox(&self, peer_id: &str) -> Vec<InboxItem> {
        let mut inner = self.inner.lock().unwrap();
        inner
            .peers
            .get_mut(peer_id)
            .map(|p| p.inbox.drain(..).collect())
            .unwrap_or_default()
    }
}

impl MediaApi for Broker {
    fn register(&self, peer_id: &str, now: Millis) -> Result<(), SignalError> {
        if peer_id.is_empty() {
            return Err(SignalError::EmptyPeerId);
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.peers.contains_key(peer_id) {
            return Err(SignalError::Conflict(peer_id.to_string()));
        }
        inner.peers.insert(
            peer_id.to_string(),
            PeerRecord {
                registered_at: now,
                inbox: VecDeque::new(),
            },
        );
        Ok(())
    }

    /// Removes the peer and ends every session it takes part in.
    fn unregister(&self, peer_id: &str, _now: Millis) {
        let mut inner = self.inner.lock().unwrap();
        let affected: Vec<u64> = inner
            .sessions
            .values()
            .filter(|s| s.state != SessionState::Ended && (s.caller == peer_id || s.callee == peer_id))
            .map(|s| s.session_id)
            .collect();
        for id in affected {
            inner.end_session(id, "peer-left");
        }
        inner.peers.remove(peer_id);
    }

    fn call(&self, caller: &str, callee: &str, profile: &str, now: Millis) -> Result<u64, SignalError> {
        let latency = self
            .profiles
            .get(profile)
            .ok_or_else(|| SignalError::UnknownProfile(profile.to_string()))?;
        Ok(self.call_with_latency(caller, callee, latency, now)?.session_id)
    }

    fn publish_frame(&self, session_id: u64, frame: Frame, now: Millis) -> Result<u64, SignalError> {
        let mut inner = self.inner.lock().unwrap();
        let order = inner.next_order;
        let session = inner
            .sessions
            .get_mut(&session_id)
            .ok_or(SignalError::NoSuchSession(session_id))?;
        if session.state != SessionState::Active {
            return Err(SignalError::StaleSession(session_id));
        }
        let seq = session.frames_sent;
        session.frames_sent += 1;
        let due = now + session.latency_ms;
        inner.next_order += 1;
        inner.in_flight.push(Reverse((due, order)));
        inner.payloads.insert(
            order,
            InFlight {
                session_id,
                seq,
                sent_at: now,
                frame,
            },
        );
        Ok(seq)
    }

    fn hangup(&self, session_id: u64, reason: &str, _now: Millis) -> Result<(), SignalError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.sessions.contains_key(&session_id) {
            return Err(SignalError::NoSuchSession(session_id));
        }
        inner.end_session(session_id, reason);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;

    fn frame(ts: Millis) -> Frame {
        Frame::new(GrayImage::new(2, 2), ts, "cam")
    }

    fn broker() -> Broker {
        let b = Broker::new(LatencyProfiles::default());
        b.register("dev", 0).unwrap();
        b.register("user-7", 0).unwrap();
        b
    }

    fn frames(items: Vec<InboxItem>) -> Vec<DeliveredFrame> {
        items
            .into_iter()
            .filter_map(|i| match i {
                InboxItem::Frame(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn registration_rules() {
        let b = broker();
        assert_eq!(b.register("user-7", 1), Err(SignalError::Conflict("user-7".into())));
        assert_eq!(b.register("", 1), Err(SignalError::EmptyPeerId));
        assert!(b.call("dev", "user-7", "pi3b", 0).is_ok());
        assert_eq!(b.call("dev", "ghost", "pi3b", 0), Err(SignalError::NoSuchPeer("ghost".into())));
        assert_eq!(b.call("dev", "user-7", "vhs", 0), Err(SignalError::UnknownProfile("vhs".into())));
    }

    #[test]
    fn thousand_peers_reachable() {
        let b = Broker::new(LatencyProfiles::default());
        b.register("dev", 0).unwrap();
        for i in 0..1000 {
            b.register(&format!("user-{i}"), 0).unwrap();
        }
        for i in 0..1000 {
            assert!(b.call("dev", &format!("user-{i}"), "pi3b", 0).is_ok());
        }
    }

    #[test]
    fn delivery_waits_for_latency() {
        let b = broker();
        let s = b.call("dev", "user-7", "pi3b", 0).unwrap();
        b.publish_frame(s, frame(1_000), 1_000).unwrap();
        assert_eq!(b.next_due(), Some(1_350));
        b.pump(1_349);
        assert!(b.take_inbox("user-7").is_empty());
        assert_eq!(b.pump(1_350), vec!["user-7".to_string()]);
        let got = frames(b.take_inbox("user-7"));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].delivered_at - got[0].sent_at, 350);
    }

    #[test]
    fn zero_latency_is_immediate_and_ordered() {
        let b = broker();
        let s = b.call_with_latency("dev", "user-7", 0, 0).unwrap().session_id;
        for t in 0..100 {
            b.publish_frame(s, frame(t), 5).unwrap();
        }
        b.pump(5);
        let seqs: Vec<u64> = frames(b.take_inbox("user-7")).iter().map(|f| f.seq).collect();
        assert_eq!(seqs, (0..100).collect::<Vec<_>>());
        let session = b.session(s).unwrap();
        assert_eq!((session.frames_sent, session.frames_delivered), (100, 100));
    }

    #[test]
    fn two_cameras_one_callee() {
        let b = broker();
        b.register("dev-side", 0).unwrap();
        let a = b.call("dev", "user-7", "pi3b", 0).unwrap();
        let c = b.call("dev-side", "user-7", "pizero2w", 0).unwrap();
        b.publish_frame(a, frame(0), 0).unwrap();
        b.publish_frame(c, frame(0), 0).unwrap();
        b.pump(10_000);
        let got = frames(b.take_inbox("user-7"));
        assert_eq!(got.iter().map(|f| f.caller.as_str()).collect::<Vec<_>>(), vec!["dev", "dev-side"]);
    }

    #[test]
    fn hangup_discards_in_flight_and_rejects_publish() {
        let b = broker();
        let s = b.call("dev", "user-7", "pi3b", 0).unwrap();
        b.publish_frame(s, frame(0), 0).unwrap();
        b.hangup(s, "timeout", 100).unwrap();
        assert_eq!(b.session(s).unwrap().state, SessionState::Ended);
        assert_eq!(b.publish_frame(s, frame(1), 200), Err(SignalError::StaleSession(s)));
        assert_eq!(b.next_due(), None);
        b.pump(1_000);
        let inbox = b.take_inbox("user-7");
        assert_eq!(
            inbox,
            vec![InboxItem::Hangup {
                session_id: s,
                reason: "timeout".into()
            }]
        );
        assert_eq!(b.hangup(999, "x", 0), Err(SignalError::NoSuchSession(999)));
    }

    #[test]
    fn callee_leaving_ends_session() {
        let b = broker();
        let s = b.call("dev", "user-7", "pi3b", 0).unwrap();
        b.unregister("user-7", 10);
        let session = b.session(s).unwrap();
        assert_eq!(session.state, SessionState::Ended);
        assert_eq!(session.end_reason.as_deref(), Some("peer-left"));
    }

    #[test]
    fn concurrent_registration_is_unique() {
        let b = Arc::new(Broker::new(LatencyProfiles::default()));
        let wins: usize = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..16)
                .map(|_| {
                    let b = b.clone();
                    scope.spawn(move || b.register("same", 0).is_ok() as usize)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(wins, 1);
    }
}
