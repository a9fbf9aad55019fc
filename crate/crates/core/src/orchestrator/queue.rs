use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub user: String,
    /// Arrival number; strictly increasing, never reused.
    pub token: u64,
    pub peer_id: String,
    pub joined_at: Millis,
    pub last_seen: Millis,
}

/// What a waiting user sees: their arrival number and their place in line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub token: u64,
    pub position: usize,
}

/// FIFO wait list for one experiment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WaitQueue {
    entries: VecDeque<QueueEntry>,
    next_token: u64,
}

impl WaitQueue {
    pub fn new() -> Self {
        Self {
            entries: VecDeque::new(),
            next_token: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn front(&self) -> Option<&QueueEntry> {
        self.entries.front()
    }

    /// Adds `user` at the back, or returns their existing ticket.
    pub fn join(&mut self, user: &str, peer_id: &str, now: Millis) -> Ticket {
        if let Some(t) = self.touch(user, now) {
            return t;
        }
        let token = self.next_token.max(1);
        self.next_token = token + 1;
        self.entries.push_back(QueueEntry {
            user: user.to_string(),
            token,
            peer_id: peer_id.to_string(),
            joined_at: now,
            last_seen: now,
        });
        Ticket {
            token,
            position: self.entries.len(),
        }
    }

    pub fn ticket(&self, user: &str) -> Option<Ticket> {
        self.entries.iter().position(|e| e.user == user).map(|i| Ticket {
            token: self.entries[i].token,
            position: i + 1,
        })
    }

    /// Marks the user as still waiting.
    pub fn touch(&mut self, user: &str, now: Millis) -> Option<Ticket> {
        let i = self.entries.iter().position(|e| e.user == user)?;
        self.entries[i].last_seen = now;
        Some(Ticket {
            token: self.entries[i].token,
            position: i + 1,
        })
    }

    pub fn remove(&mut self, user: &str) -> Option<QueueEntry> {
        let i = self.entries.iter().position(|e| e.user == user)?;
        self.entries.remove(i)
    }

    pub fn pop_front(&mut self) -> Option<QueueEntry> {
        self.entries.pop_front()
    }

    /// Puts a previously popped entry back ahead of everyone who arrived
    /// after it.
    pub fn requeue(&mut self, entry: QueueEntry) {
        let at = self
            .entries
            .iter()
            .position(|e| e.token > entry.token)
            .unwrap_or(self.entries.len());
        self.entries.insert(at, entry);
    }

    /// Drops entries idle for longer than `idle_ms`.
    pub fn expire(&mut self, now: Millis, idle_ms: Millis) -> Vec<QueueEntry> {
        let mut gone = Vec::new();
        self.entries.retain(|e| {
            let keep = now.saturating_sub(e.last_seen) < idle_ms;
            if !keep {
                gone.push(e.clone());
            }
            keep
        });
        gone
    }

    /// Moves the named users to the head, keeping arrival order among them.
    pub fn promote(&mut self, users: &[String]) {
        let (mut front, back): (VecDeque<_>, VecDeque<_>) =
            self.entries.drain(..).partition(|e| users.contains(&e.user));
        front.extend(back);
        self.entries = front;
    }

    pub fn next_expiry(&self, idle_ms: Millis) -> Option<Millis> {
        self.entries.iter().map(|e| e.last_seen + idle_ms).min()
    }
}
