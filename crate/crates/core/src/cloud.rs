//! Token-scoped virtual-pin store with device presence and an append-only
//! journal.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis, SECOND};

/// Pin assignments shared by devices, the orchestrator and the tester.
pub mod pins {
    /// FL: object distance in cm. VR: rod travel in mm.
    pub const POSITION_A: &str = "V0";
    /// FL: screen distance in cm. VR: submerged fraction.
    pub const POSITION_B: &str = "V1";
    /// Occupancy flag, "1" occupied and "0" vacant.
    pub const FLAG: &str = "V2";
    /// Last input parameters relayed by the server, as JSON.
    pub const INPUT: &str = "V3";
    /// Error code, "0" when healthy.
    pub const ERROR: &str = "V9";

    pub const FLAG_OCCUPIED: &str = "1";
    pub const FLAG_VACANT: &str = "0";
    pub const NO_ERROR: &str = "0";
}

pub const HEARTBEAT_TTL_MS: Millis = 10 * SECOND;
pub const HEARTBEAT_PERIOD_MS: Millis = 3 * SECOND;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CloudError {
    #[error("unknown device token")]
    UnknownToken,
    #[error("malformed pin name {0:?}")]
    BadPin(String),
    #[error("cloud unreachable: {0}")]
    Transport(String),
}

/// Operations devices and servers perform against the pin cloud.
pub trait CloudApi: Send + Sync {
    fn update_pin(&self, token: &str, pin: &str, value: &str) -> Result<(), CloudError>;
    fn get_pin(&self, token: &str, pin: &str) -> Result<Option<String>, CloudError>;
    fn heartbeat(&self, token: &str) -> Result<(), CloudError>;
    fn is_connected(&self, token: &str) -> bool;
}

impl<T: CloudApi + ?Sized> CloudApi for Arc<T> {
    fn update_pin(&self, token: &str, pin: &str, value: &str) -> Result<(), CloudError> {
        (**self).update_pin(token, pin, value)
    }
    fn get_pin(&self, token: &str, pin: &str) -> Result<Option<String>, CloudError> {
        (**self).get_pin(token, pin)
    }
    fn heartbeat(&self, token: &str) -> Result<(), CloudError> {
        (**self).heartbeat(token)
    }
    fn is_connected(&self, token: &str) -> bool {
        (**self).is_connected(token)
    }
}

pub fn valid_pin(pin: &str) -> bool {
    pin.len() > 1 && pin.starts_with('V') && pin[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Pin values are stored as text and read back as a number when they parse
/// as one.
pub fn coerce(value: &str) -> serde_json::Value {
    match value.trim().parse::<f64>() {
        Ok(n) if n.is_finite() => serde_json::Number::from_f64(n)
            .map(serde_json::Value::Number)
            .unwrap_or_else(|| serde_json::Value::String(value.to_string())),
        _ => serde_json::Value::String(value.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinEntry {
    pub value: String,
    pub last_write: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevicePresence {
    pub connected: bool,
    pub last_heartbeat: Option<Millis>,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: Millis,
    pub token: String,
    pub pin: String,
    pub value: String,
}

#[derive(Debug, Default)]
struct Device {
    pins: BTreeMap<String, PinEntry>,
    last_heartbeat: Option<Millis>,
}

pub struct PinStore {
    clock: Arc<dyn Clock>,
    ttl_ms: Millis,
    devices: RwLock<HashMap<String, Device>>,
    journal: Option<Mutex<File>>,
}

impl std::fmt::Debug for PinStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PinStore").field("ttl_ms", &self.ttl_ms).finish_non_exhaustive()
    }
}

impl PinStore {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            ttl_ms: HEARTBEAT_TTL_MS,
            devices: RwLock::new(HashMap::new()),
            journal: None,
        }
    }

    pub fn with_ttl(mut self, ttl_ms: Millis) -> Self {
        self.ttl_ms = ttl_ms;
        self
    }

    /// Replays `path` (if it exists) and appends every later write to it.
    pub fn with_journal(mut self, path: &Path) -> std::io::Result<Self> {
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                let mut devices = self.devices.write().unwrap();
                devices.entry(rec.token).or_default().pins.insert(
                    rec.pin,
                    PinEntry {
                        value: rec.value,
                        last_write: rec.ts,
                    },
                );
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn register_device(&self, token: &str) {
        self.devices.write().unwrap().entry(token.to_string()).or_default();
    }

    pub fn is_registered(&self, token: &str) -> bool {
        self.devices.read().unwrap().contains_key(token)
    }

    pub fn entry(&self, token: &str, pin: &str) -> Result<Option<PinEntry>, CloudError> {
        let devices = self.devices.read().unwrap();
        let dev = devices.get(token).ok_or(CloudError::UnknownToken)?;
        if !valid_pin(pin) {
            return Err(CloudError::BadPin(pin.to_string()));
        }
        Ok(dev.pins.get(pin).cloned())
    }

    pub fn presence(&self, token: &str) -> DevicePresence {
        let now = self.clock.now_ms();
        let last = self.devices.read().unwrap().get(token).and_then(|d| d.last_heartbeat);
        DevicePresence {
            connected: last.is_some_and(|t| now.saturating_sub(t) <= self.ttl_ms),
            last_heartbeat: last,
        }
    }

    fn journal_append(&self, rec: &JournalRecord) {
        if let Some(journal) = &self.journal {
            let mut line = serde_json::to_string(rec).expect("journal record serializes");
            line.push('\n');
            let mut file = journal.lock().unwrap();
            if let Err(e) = file.write_all(line.as_bytes()) {
                tracing::warn!("pin journal write failed: {e}");
            }
        }
    }
}

impl CloudApi for PinStore {
    fn update_pin(&self, token: &str, pin: &str, value: &str) -> Result<(), CloudError> {
        let now = self.clock.now_ms();
        {
            let mut devices = self.devices.write().unwrap();
            let dev = devices.get_mut(token).ok_or(CloudError::UnknownToken)?;
            if !valid_pin(pin) {
                return Err(CloudError::BadPin(pin.to_string()));
            }
            dev.pins.insert(
                pin.to_string(),
                PinEntry {
                    value: value.to_string(),
                    last_write: now,
                },
            );
            // journal while still holding the lock so file order is write order
            self.journal_append(&JournalRecord {
                ts: now,
                token: token.to_string(),
                pin: pin.to_string(),
                value: value.to_string(),
            });
        }
        Ok(())
    }

    fn get_pin(&self, token: &str, pin: &str) -> Result<Option<String>, CloudError> {
        Ok(self.entry(token, pin)?.map(|e| e.value))
    }

    fn heartbeat(&self, token: &str) -> Result<(), CloudError> {
        let now = self.clock.now_ms();
        let mut devices = self.devices.write().unwrap();
        let dev = devices.get_mut(token).ok_or(CloudError::UnknownToken)?;
        dev.last_heartbeat = Some(now);
        Ok(())
    }

    fn is_connected(&self, token: &str) -> bool {
        self.presence(token).connected
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    fn store() -> (VirtualClock, PinStore) {
        let clock = VirtualClock::new();
        let store = PinStore::new(Arc::new(clock.clone()));
        store.register_device("devA");
        store.register_device("devB");
        (clock, store)
    }

    #[test]
    fn write_then_read() {
        let (_, s) = store();
        s.update_pin("devA", "V0", "1").unwrap();
        assert_eq!(s.get_pin("devA", "V0").unwrap().as_deref(), Some("1"));
        s.update_pin("devA", "V9", "E02").unwrap();
        assert_eq!(s.get_pin("devA", "V9").unwrap().as_deref(), Some("E02"));
        assert_eq!(s.get_pin("devA", "V5").unwrap(), None);
    }

    #[test]
    fn numeric_coercion() {
        assert_eq!(coerce("42"), serde_json::json!(42.0));
        assert_eq!(coerce("20.5"), serde_json::json!(20.5));
        assert_eq!(coerce("E02"), serde_json::json!("E02"));
        assert_eq!(coerce("NaN"), serde_json::json!("NaN"));
    }

    #[test]
    fn errors() {
        let (_, s) = store();
        assert_eq!(s.update_pin("nope", "V0", "1"), Err(CloudError::UnknownToken));
        assert_eq!(s.get_pin("nope", "V0"), Err(CloudError::UnknownToken));
        for bad in ["V", "v1", "X1", "V1a", ""] {
            assert!(matches!(s.update_pin("devA", bad, "1"), Err(CloudError::BadPin(_))), "{bad}");
        }
    }

    #[test]
    fn namespaces_are_isolated() {
        let (_, s) = store();
        s.update_pin("devA", "V1", "a").unwrap();
        assert_eq!(s.get_pin("devB", "V1").unwrap(), None);
    }

    #[test]
    fn presence_follows_ttl() {
        let (clock, s) = store();
        assert!(!s.is_connected("devA"));
        assert!(!s.is_connected("never"));
        s.heartbeat("devA").unwrap();
        clock.advance_by(1_000);
        assert!(s.is_connected("devA"));
        clock.advance_by(9_000);
        assert!(s.is_connected("devA"));
        clock.advance_by(20_000);
        assert!(!s.is_connected("devA"));
        assert_eq!(s.heartbeat("never"), Err(CloudError::UnknownToken));
    }

    #[test]
    fn journal_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pins.ndjson");
        let clock = VirtualClock::starting_at(5);
        {
            let s = PinStore::new(Arc::new(clock.clone())).with_journal(&path).unwrap();
            s.register_device("devA");
            s.update_pin("devA", "V0", "20").unwrap();
            s.update_pin("devA", "V0", "21").unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let first: JournalRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, JournalRecord { ts: 5, token: "devA".into(), pin: "V0".into(), value: "20".into() });
        let s = PinStore::new(Arc::new(clock)).with_journal(&path).unwrap();
        assert_eq!(s.get_pin("devA", "V0").unwrap().as_deref(), Some("21"));
    }
}
