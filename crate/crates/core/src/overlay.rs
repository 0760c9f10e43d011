//! Broker overlay: rank resolution, lead/follower bootstrap with exponential
//! retry, shared-secret admission and down-rank membership.
//!
//! [`Overlay`] is a passive state machine. The simulation feeds it delivered
//! events and schedules whatever follow-up it asks for.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClusterConfig, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("host {0} is not in the ranked host list")]
    UnknownHost(String),
    #[error("rank {0} outside the configured host list")]
    RankOutOfRange(u32),
    #[error("rank 0 listens and never bootstraps")]
    LeadCannotConnect,
}

/// Position of `hostname` in the shared host list.
///
/// A namespaced burst hostname (`burst-<k>/<host>`) resolves through its
/// host part, so remote brokers find their rank in the same list.
pub fn resolve_rank(hostname: &str, config: &ClusterConfig) -> Result<u32, OverlayError> {
    let bare = match hostname.split_once('/') {
        Some((ns, host)) if ns.starts_with("burst-") => host,
        _ => hostname,
    };
    config
        .ranked_hosts()
        .iter()
        .position(|h| h == bare)
        .map(|r| r as u32)
        .ok_or_else(|| OverlayError::UnknownHost(hostname.to_string()))
}

/// Reconnect backoff: `interval(n) = min(base * multiplier^n, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base_interval: f64,
    pub multiplier: f64,
    pub cap: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_interval: 0.1,
            multiplier: 2.0,
            cap: 30.0,
        }
    }
}

impl RetryPolicy {
    pub fn interval(&self, attempt: u32) -> f64 {
        let raw = self.base_interval * self.multiplier.powi(attempt.min(i32::MAX as u32) as i32);
        raw.min(self.cap)
    }

    /// Times of attempts `0..=n` for a broker that starts at `start`.
    pub fn attempt_times(&self, start: SimTime, n: u32) -> Vec<SimTime> {
        let mut t = start;
        let mut out = Vec::with_capacity(n as usize + 1);
        for k in 0..=n {
            out.push(t);
            t += self.interval(k);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fanout")]
pub enum Topology {
    /// Every follower connects straight to rank 0.
    #[default]
    Flat,
    Tree(u32),
}

impl Topology {
    pub fn parent(&self, rank: u32) -> Option<u32> {
        if rank == 0 {
            return None;
        }
        match *self {
            Topology::Flat => Some(0),
            Topology::Tree(fanout) => Some((rank - 1) / fanout.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokerPhase {
    Down,
    Connecting,
    Online,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerState {
    pub rank: u32,
    pub phase: BrokerPhase,
    pub retry_attempt: u32,
    pub next_retry_at: Option<SimTime>,
    pub parent_rank: Option<u32>,
    /// Secret this broker presents when connecting.
    #[serde(skip)]
    secret: Vec<u8>,
    /// Bumped every time the broker (re)starts so stale attempts are dropped.
    epoch: u64,
}

impl BrokerState {
    fn new(rank: u32) -> Self {
        Self {
            rank,
            phase: BrokerPhase::Down,
            retry_attempt: 0,
            next_retry_at: None,
            parent_rank: None,
            secret: Vec::new(),
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// What the simulation must do after an overlay transition.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptOutcome {
    /// Parent admitted the broker; it is online once the connect latency
    /// has elapsed.
    Admitted,
    /// Try again at the given time with the given attempt number.
    Retry { at: SimTime, attempt: u32 },
    /// Secret rejected too many times; the broker stays down.
    GaveUp,
    /// The attempt belonged to an older incarnation of the broker.
    Stale,
}

/// Broker roles once a rank is up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Rank 0 runs the queue. `auto_submit` carries the entry command when
    /// the lead should submit it once the cluster is full.
    Lead { auto_submit: Option<String> },
    Executor,
}

pub fn start_role(rank: u32, config: &ClusterConfig, interactive: bool) -> Role {
    if rank == 0 {
        let auto_submit = (!interactive && !config.entry_command.trim().is_empty())
            .then(|| config.entry_command.clone());
        Role::Lead { auto_submit }
    } else {
        Role::Executor
    }
}

/// Admission secret-mismatch tolerance before a broker stops retrying.
pub const DEFAULT_MAX_SECRET_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone)]
pub struct Overlay {
    brokers: Vec<BrokerState>,
    lead_secret: Vec<u8>,
    pub topology: Topology,
    pub policy: RetryPolicy,
    pub max_secret_attempts: u32,
    secret_failures: BTreeMap<u32, u32>,
}

impl Overlay {
    pub fn new(config: &ClusterConfig, topology: Topology, policy: RetryPolicy) -> Self {
        Self {
            brokers: (0..config.max_size()).map(BrokerState::new).collect(),
            lead_secret: config.secret.clone(),
            topology,
            policy,
            max_secret_attempts: DEFAULT_MAX_SECRET_ATTEMPTS,
            secret_failures: BTreeMap::new(),
        }
    }

    pub fn max_size(&self) -> u32 {
        self.brokers.len() as u32
    }

    pub fn broker(&self, rank: u32) -> Option<&BrokerState> {
        self.brokers.get(rank as usize)
    }

    fn broker_mut(&mut self, rank: u32) -> Result<&mut BrokerState, OverlayError> {
        self.brokers
            .get_mut(rank as usize)
            .ok_or(OverlayError::RankOutOfRange(rank))
    }

    pub fn phase(&self, rank: u32) -> BrokerPhase {
        self.broker(rank).map_or(BrokerPhase::Down, |b| b.phase)
    }

    pub fn is_online(&self, rank: u32) -> bool {
        self.phase(rank) == BrokerPhase::Online
    }

    /// Rank 0 starts listening.
    pub fn start_lead(&mut self) {
        let lead = &mut self.brokers[0];
        lead.phase = BrokerPhase::Online;
        lead.parent_rank = None;
        lead.epoch += 1;
    }

    /// A follower process starts and will make attempt 0 at `now`.
    pub fn begin_bootstrap(&mut self, rank: u32, secret: &[u8], now: SimTime) -> Result<u64, OverlayError> {
        if rank == 0 {
            return Err(OverlayError::LeadCannotConnect);
        }
        let broker = self.broker_mut(rank)?;
        broker.phase = BrokerPhase::Connecting;
        broker.retry_attempt = 0;
        broker.next_retry_at = Some(now);
        broker.parent_rank = None;
        broker.secret = secret.to_vec();
        broker.epoch += 1;
        let epoch = broker.epoch;
        self.secret_failures.remove(&rank);
        Ok(epoch)
    }

    /// Connect attempt number `attempt` made by `rank` at `now`.
    pub fn on_attempt(&mut self, rank: u32, epoch: u64, attempt: u32, now: SimTime) -> AttemptOutcome {
        let parent = self.topology.parent(rank);
        let parent_up = parent.is_some_and(|p| self.is_online(p));
        let secret_ok = self
            .broker(rank)
            .is_some_and(|b| b.secret == self.lead_secret);
        let max_attempts = self.max_secret_attempts;
        let policy = self.policy;
        let Some(broker) = self.brokers.get_mut(rank as usize) else {
            return AttemptOutcome::Stale;
        };
        if broker.epoch != epoch || broker.phase != BrokerPhase::Connecting {
            return AttemptOutcome::Stale;
        }
        broker.retry_attempt = attempt;
        if parent_up && secret_ok {
            broker.next_retry_at = None;
            return AttemptOutcome::Admitted;
        }
        if parent_up {
            let failures = self.secret_failures.entry(rank).or_insert(0);
            *failures += 1;
            if *failures >= max_attempts {
                broker.phase = BrokerPhase::Down;
                broker.next_retry_at = None;
                return AttemptOutcome::GaveUp;
            }
        }
        let at = now + policy.interval(attempt);
        broker.next_retry_at = Some(at);
        AttemptOutcome::Retry {
            at,
            attempt: attempt + 1,
        }
    }

    /// The admitted connection completes. Returns a retry if the parent went
    /// away in the meantime.
    pub fn on_connected(&mut self, rank: u32, epoch: u64, now: SimTime) -> AttemptOutcome {
        let parent = self.topology.parent(rank);
        let parent_up = parent.is_some_and(|p| self.is_online(p));
        let policy = self.policy;
        let Some(broker) = self.brokers.get_mut(rank as usize) else {
            return AttemptOutcome::Stale;
        };
        if broker.epoch != epoch || broker.phase != BrokerPhase::Connecting {
            return AttemptOutcome::Stale;
        }
        if !parent_up {
            let attempt = broker.retry_attempt;
            let at = now + policy.interval(attempt);
            broker.next_retry_at = Some(at);
            return AttemptOutcome::Retry {
                at,
                attempt: attempt + 1,
            };
        }
        broker.phase = BrokerPhase::Online;
        broker.parent_rank = parent;
        AttemptOutcome::Admitted
    }

    /// The broker's pod is gone. `lost` marks an unexpected failure rather
    /// than an orderly scale-down. Returns online descendants that must
    /// reconnect.
    pub fn on_leave(&mut self, rank: u32, lost: bool) -> Vec<u32> {
        let Some(broker) = self.brokers.get_mut(rank as usize) else {
            return Vec::new();
        };
        broker.phase = if lost { BrokerPhase::Lost } else { BrokerPhase::Down };
        broker.parent_rank = None;
        broker.next_retry_at = None;
        broker.epoch += 1;
        self.secret_failures.remove(&rank);
        let mut orphans = Vec::new();
        let mut gone = vec![rank];
        while let Some(parent) = gone.pop() {
            for b in &mut self.brokers {
                if b.phase == BrokerPhase::Online && b.parent_rank == Some(parent) {
                    b.phase = BrokerPhase::Connecting;
                    b.parent_rank = None;
                    orphans.push(b.rank);
                    gone.push(b.rank);
                }
            }
        }
        orphans.sort_unstable();
        orphans
    }

    /// Restarts bootstrap for a broker knocked back to connecting by its
    /// parent leaving.
    pub fn rebootstrap(&mut self, rank: u32, now: SimTime) -> Option<u64> {
        let secret = self.broker(rank)?.secret.clone();
        self.begin_bootstrap(rank, &secret, now).ok()
    }

    /// The lead's view of every configured rank.
    pub fn membership(&self) -> BTreeMap<u32, BrokerPhase> {
        self.brokers.iter().map(|b| (b.rank, b.phase)).collect()
    }

    pub fn online_ranks(&self) -> Vec<u32> {
        self.brokers
            .iter()
            .filter(|b| b.phase == BrokerPhase::Online)
            .map(|b| b.rank)
            .collect()
    }
}
