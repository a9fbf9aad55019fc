use std::collections::{HashMap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Local user accounts and bearer tokens.
#[derive(Debug)]
pub struct Accounts {
    users: HashMap<String, String>,
    tokens: HashMap<String, String>,
    revoked: HashSet<String>,
    rng: ChaCha8Rng,
}

fn secret_hash(username: &str, secret: &str) -> String {
    let mut h = Sha256::new();
    h.update(username.as_bytes());
    h.update([0u8]);
    h.update(secret.as_bytes());
    format!("{:x}", h.finalize())
}

impl Accounts {
    pub fn new(seed: u64) -> Self {
        Self {
            users: HashMap::new(),
            tokens: HashMap::new(),
            revoked: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add_user(&mut self, username: &str, secret: &str) {
        self.users.insert(username.to_string(), secret_hash(username, secret));
    }

    pub fn login(&mut self, username: &str, secret: &str) -> Option<String> {
        let stored = self.users.get(username)?;
        if *stored != secret_hash(username, secret) {
            return None;
        }
        let mut raw = [0u8; 16];
        self.rng.fill_bytes(&mut raw);
        let token: String = raw.iter().map(|b| format!("{b:02x}")).collect();
        self.tokens.insert(token.clone(), username.to_string());
        Some(token)
    }

    pub fn authenticate(&self, token: &str) -> Option<String> {
        if self.revoked.contains(token) {
            return None;
        }
        self.tokens.get(token).cloned()
    }

    pub fn logout(&mut self, token: &str) {
        if self.tokens.remove(token).is_some() {
            self.revoked.insert(token.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn login_flow() {
        let mut a = Accounts::new(1);
        a.add_user("ada", "pw");
        assert!(a.login("ada", "nope").is_none());
        assert!(a.login("bob", "pw").is_none());
        let t = a.login("ada", "pw").unwrap();
        assert_eq!(a.authenticate(&t).as_deref(), Some("ada"));
        a.logout(&t);
        assert_eq!(a.authenticate(&t), None);
        let t2 = a.login("ada", "pw").unwrap();
        assert_ne!(t, t2);
    }
}
