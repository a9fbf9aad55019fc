//! Time sources.
//!
//! Every component takes its notion of "now" from a [`Clock`]. Timestamps are
//! milliseconds since the Unix epoch so they can be rendered as ISO-8601 UTC
//! regardless of whether the clock is real or simulated.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};

/// Milliseconds since the Unix epoch.
pub type Millis = u64;

pub const SECOND: Millis = 1_000;
pub const MINUTE: Millis = 60 * SECOND;
pub const HOUR: Millis = 60 * MINUTE;
pub const DAY: Millis = 24 * HOUR;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Millis;
}

/// Deterministic clock that only moves when told to.
///
/// Cloning shares the underlying counter, so every component handed a clone
/// observes the same virtual time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(ms: Millis) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(ms)),
        }
    }

    /// Moves the clock to `ms`. Going backwards is a logic error and is ignored.
    pub fn advance_to(&self, ms: Millis) {
        self.now.fetch_max(ms, Ordering::SeqCst);
    }

    pub fn advance_by(&self, delta: Millis) {
        self.now.fetch_add(delta, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> Millis {
        self.now.load(Ordering::SeqCst)
    }
}

/// Wall clock anchored once to `SystemTime` and advanced by a monotonic
/// `Instant`, so readings never go backwards even if the system time is
/// adjusted.
#[derive(Debug, Clone)]
pub struct SystemClock {
    anchor: Duration,
    started: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        // kept at full precision so separate instances agree on the millisecond
        let anchor = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Self {
            anchor,
            started: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        (self.anchor + self.started.elapsed()).as_millis() as Millis
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ms(&self) -> Millis {
        (**self).now_ms()
    }
}

pub fn to_datetime(ms: Millis) -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp_millis(ms as i64).unwrap_or_default()
}

/// Formats a timestamp as ISO-8601 UTC with millisecond precision.
pub fn iso8601(ms: Millis) -> String {
    to_datetime(ms).to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_iso8601(s: &str) -> Option<Millis> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|dt| dt.timestamp_millis().max(0) as Millis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_is_shared_between_clones() {
        let a = VirtualClock::starting_at(1_000);
        let b = a.clone();
        a.advance_by(500);
        assert_eq!(b.now_ms(), 1_500);
        b.advance_to(1_200);
        assert_eq!(a.now_ms(), 1_500, "clock must not move backwards");
    }

    #[test]
    fn system_clock_is_monotone() {
        let clock = SystemClock::new();
        let t0 = clock.now_ms();
        let t1 = clock.now_ms();
        assert!(t1 >= t0);
    }

    #[test]
    fn iso_round_trip() {
        let ms = 1_688_169_600_123;
        let text = iso8601(ms);
        assert_eq!(text, "2023-07-01T00:00:00.123Z");
        assert_eq!(parse_iso8601(&text), Some(ms));
    }
}
