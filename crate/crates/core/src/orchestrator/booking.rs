use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{iso8601, Millis, DAY, MINUTE};

pub const SLOT_MS: Millis = 30 * MINUTE;
/// How far ahead the next-free search looks.
const SEARCH_HORIZON_MS: Millis = 366 * DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationStatus {
    Booked,
    Active,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub id: u64,
    pub user: String,
    pub experiment_id: String,
    pub start: Millis,
    pub end: Millis,
    pub status: ReservationStatus,
}

impl Reservation {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "user": self.user,
            "experiment_id": self.experiment_id,
            "start": iso8601(self.start),
            "end": iso8601(self.end),
            "status": self.status,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BookingError {
    #[error("interval must be aligned to 30-minute slots")]
    Misaligned,
    #[error("interval must be non-empty")]
    Empty,
    #[error("interval must start in the future")]
    InPast,
    #[error("no capacity; next free slot starts at {}", iso8601(*next_free))]
    Conflict { next_free: Millis },
}

/// Slot reservations for one experiment's node pool.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Calendar {
    reservations: Vec<Reservation>,
    next_id: u64,
}

impl Calendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reservations(&self) -> &[Reservation] {
        &self.reservations
    }

    /// Largest number of reservations sharing any slot of `[start, end)`.
    pub fn max_overlap(&self, start: Millis, end: Millis) -> usize {
        let mut worst = 0;
        let mut slot = start;
        while slot < end {
            let n = self
                .reservations
                .iter()
                .filter(|r| r.start <= slot && slot < r.end)
                .count();
            worst = worst.max(n);
            slot += SLOT_MS;
        }
        worst
    }

    pub fn book(
        &mut self,
        user: &str,
        experiment_id: &str,
        start: Millis,
        end: Millis,
        now: Millis,
        pool_size: usize,
    ) -> Result<Reservation, BookingError> {
        if start % SLOT_MS != 0 || end % SLOT_MS != 0 {
            return Err(BookingError::Misaligned);
        }
        if end <= start {
            return Err(BookingError::Empty);
        }
        if start < now {
            return Err(BookingError::InPast);
        }
        if self.max_overlap(start, end) >= pool_size {
            return Err(BookingError::Conflict {
                next_free: self.next_free(start, end - start, pool_size),
            });
        }
        self.next_id += 1;
        let r = Reservation {
            id: self.next_id,
            user: user.to_string(),
            experiment_id: experiment_id.to_string(),
            start,
            end,
            status: ReservationStatus::Booked,
        };
        self.reservations.push(r.clone());
        Ok(r)
    }

    fn next_free(&self, start: Millis, len: Millis, pool_size: usize) -> Millis {
        let mut s = start + SLOT_MS;
        while s < start + SEARCH_HORIZON_MS {
            if self.max_overlap(s, s + len) < pool_size {
                return s;
            }
            s += SLOT_MS;
        }
        s
    }

    /// Moves reservations whose slot has begun to active (returning their
    /// holders) and retires finished ones.
    pub fn activate(&mut self, now: Millis) -> Vec<String> {
        let mut holders = Vec::new();
        for r in &mut self.reservations {
            if r.status != ReservationStatus::Completed && r.end <= now {
                r.status = ReservationStatus::Completed;
            } else if r.status == ReservationStatus::Booked && r.start <= now {
                r.status = ReservationStatus::Active;
                holders.push(r.user.clone());
            }
        }
        holders
    }

    pub fn next_boundary(&self) -> Option<Millis> {
        self.reservations
            .iter()
            .filter_map(|r| match r.status {
                ReservationStatus::Booked => Some(r.start),
                ReservationStatus::Active => Some(r.end),
                ReservationStatus::Completed => None,
            })
            .min()
    }
}
