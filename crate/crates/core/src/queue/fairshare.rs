use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::QueueError;
use crate::model::SimTime;

pub const DEFAULT_HALF_LIFE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UserUsage {
    share_weight: f64,
    usage: f64,
    updated_at: SimTime,
}

/// Per-user decayed usage. Usage halves every `half_life` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    half_life: f64,
    users: BTreeMap<String, UserUsage>,
}

impl Default for Accounting {
    fn default() -> Self {
        Self::new(DEFAULT_HALF_LIFE)
    }
}

impl Accounting {
    pub fn new(half_life: f64) -> Self {
        Self {
            half_life,
            users: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, user: &str, share_weight: f64) {
        self.users
            .entry(user.to_string())
            .and_modify(|u| u.share_weight = share_weight)
            .or_insert(UserUsage {
                share_weight,
                usage: 0.0,
                updated_at: 0.0,
            });
    }

    pub fn knows(&self, user: &str) -> bool {
        self.users.contains_key(user)
    }

    fn decay(&self, u: &UserUsage, now: SimTime) -> f64 {
        let dt = (now - u.updated_at).max(0.0);
        if self.half_life <= 0.0 {
            return u.usage;
        }
        u.usage * 0.5f64.powf(dt / self.half_life)
    }

    pub fn decayed_usage(&self, user: &str, now: SimTime) -> Result<f64, QueueError> {
        let u = self
            .users
            .get(user)
            .ok_or_else(|| QueueError::UnknownUser(user.to_string()))?;
        Ok(self.decay(u, now))
    }

    /// Adds `amount` (node-seconds) to the user's decayed usage.
    pub fn charge(&mut self, user: &str, amount: f64, now: SimTime) {
        if !self.knows(user) {
            self.register(user, 1.0);
        }
        let current = self.decayed_usage(user, now).unwrap_or(0.0);
        let entry = self.users.get_mut(user).expect("registered above");
        entry.usage = current + amount.max(0.0);
        entry.updated_at = now;
    }

    /// Seeds a usage value directly, as if charged at `now`.
    pub fn set_usage(&mut self, user: &str, usage: f64, now: SimTime) {
        if !self.knows(user) {
            self.register(user, 1.0);
        }
        let entry = self.users.get_mut(user).expect("registered above");
        entry.usage = usage;
        entry.updated_at = now;
    }

    /// `share_weight / (1 + decayed_usage)`.
    pub fn priority(&self, user: &str, now: SimTime) -> Result<f64, QueueError> {
        let u = self
            .users
            .get(user)
            .ok_or_else(|| QueueError::UnknownUser(user.to_string()))?;
        Ok(u.share_weight / (1.0 + self.decay(u, now)))
    }
}

/// Free-function form of [`Accounting::priority`].
pub fn fair_share_priority(user: &str, ledger: &Accounting, now: SimTime) -> Result<f64, QueueError> {
    ledger.priority(user, now)
}
