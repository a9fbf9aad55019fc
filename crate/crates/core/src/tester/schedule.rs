use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;

/// Fixed-interval trigger for checks, one per experiment per tick. A tick
/// that finds an experiment's previous run still going skips it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduler {
    interval_ms: Millis,
    next_fire: Millis,
    experiments: Vec<String>,
    in_flight: BTreeSet<String>,
    skipped: u64,
    fired: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("check interval must be positive")]
pub struct ZeroInterval;

impl Scheduler {
    pub fn new(interval_ms: Millis, first_fire: Millis, experiments: Vec<String>) -> Result<Self, ZeroInterval> {
        if interval_ms == 0 {
            return Err(ZeroInterval);
        }
        Ok(Self {
            interval_ms,
            next_fire: first_fire,
            experiments,
            in_flight: BTreeSet::new(),
            skipped: 0,
            fired: 0,
        })
    }

    pub fn interval_ms(&self) -> Millis {
        self.interval_ms
    }

    pub fn next_fire(&self) -> Millis {
        self.next_fire
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn is_running(&self, experiment_id: &str) -> bool {
        self.in_flight.contains(experiment_id)
    }

    /// Experiments to start now. Ticks missed while the caller was busy
    /// collapse into this one.
    pub fn poll(&mut self, now: Millis) -> Vec<String> {
        if now < self.next_fire {
            return Vec::new();
        }
        let behind = (now - self.next_fire) / self.interval_ms;
        self.next_fire += (behind + 1) * self.interval_ms;
        let mut start = Vec::new();
        for exp in &self.experiments {
            if self.in_flight.contains(exp) {
                self.skipped += 1;
                tracing::info!(experiment = %exp, "previous check still running, skipping this tick");
            } else {
                self.in_flight.insert(exp.clone());
                self.fired += 1;
                start.push(exp.clone());
            }
        }
        start
    }

    pub fn finished(&mut self, experiment_id: &str) {
        self.in_flight.remove(experiment_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{HOUR, SECOND};

    #[test]
    fn eight_hour_cadence_gives_three_per_day() {
        let mut s = Scheduler::new(8 * HOUR, 0, vec!["FL".into(), "VR".into()]).unwrap();
        let mut runs = Vec::new();
        while s.next_fire() < 24 * HOUR {
            let t = s.next_fire();
            for e in s.poll(t) {
                runs.push((t, e.clone()));
                s.finished(&e);
            }
        }
        assert_eq!(runs.iter().filter(|r| r.1 == "FL").count(), 3);
        assert_eq!(runs.iter().filter(|r| r.1 == "VR").count(), 3);
    }

    #[test]
    fn overlapping_run_is_skipped() {
        let mut s = Scheduler::new(SECOND, 0, vec!["FL".into()]).unwrap();
        assert_eq!(s.poll(0), ["FL"]);
        assert!(s.poll(SECOND).is_empty());
        assert_eq!(s.skipped(), 1);
        s.finished("FL");
        assert_eq!(s.poll(2 * SECOND), ["FL"]);
    }

    #[test]
    fn one_second_smoke_mode() {
        let mut s = Scheduler::new(SECOND, 0, vec!["FL".into()]).unwrap();
        let mut n = 0;
        for t in (0..4 * SECOND).step_by(100) {
            for e in s.poll(t) {
                n += 1;
                s.finished(&e);
            }
        }
        assert!(n >= 3);
        assert!(Scheduler::new(0, 0, vec![]).is_err());
    }
}
