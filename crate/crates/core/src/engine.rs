//! Deterministic discrete-event core.
//!
//! The engine owns the virtual clock, the pending-event heap, the single
//! seeded random source and the structured event log. Events with equal
//! timestamps are delivered in insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("cannot schedule at {fire_at}: clock is already at {now}")]
    PastDeadline { fire_at: SimTime, now: SimTime },
    #[error("non-finite fire time {0}")]
    NonFinite(SimTime),
}

/// Handle returned by [`Engine::schedule`], used to cancel the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(u64);

/// Payloads the engine can log must name their kind.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

struct Scheduled<E> {
    fire_at: SimTime,
    sequence: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .total_cmp(&self.fire_at)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
}

/// An event handed back to the caller by [`Engine::next_event`].
#[derive(Debug)]
pub struct Delivered<E> {
    pub fire_at: SimTime,
    pub sequence: u64,
    pub payload: E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyDistribution {
    #[default]
    Constant,
    Uniform,
    NormalTruncated,
}

/// A named delay: `base` plus a jitter term whose shape depends on the
/// distribution. Samples are never negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(default)]
    pub name: String,
    pub base: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub distribution: LatencyDistribution,
}

impl LatencyModel {
    pub fn constant(name: impl Into<String>, base: f64) -> Self {
        Self {
            name: name.into(),
            base,
            jitter: 0.0,
            distribution: LatencyDistribution::Constant,
        }
    }

    pub fn uniform(name: impl Into<String>, base: f64, jitter: f64) -> Self {
        Self {
            name: name.into(),
            base,
            jitter,
            distribution: LatencyDistribution::Uniform,
        }
    }

    pub fn normal(name: impl Into<String>, base: f64, jitter: f64) -> Self {
        Self {
            name: name.into(),
            base,
            jitter,
            distribution: LatencyDistribution::NormalTruncated,
        }
    }

    pub fn zero() -> Self {
        Self::constant("zero", 0.0)
    }

    /// Uniform jitter is drawn from `[base, base + jitter]`; normal jitter
    /// uses `jitter` as the standard deviation, truncated at zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let value = match self.distribution {
            LatencyDistribution::Constant => self.base,
            LatencyDistribution::Uniform => {
                if self.jitter > 0.0 {
                    self.base + rng.random_range(0.0..self.jitter)
                } else {
                    self.base
                }
            }
            LatencyDistribution::NormalTruncated => {
                if self.jitter > 0.0 {
                    Normal::new(self.base, self.jitter)
                        .map(|n| n.sample(rng))
                        .unwrap_or(self.base)
                } else {
                    self.base
                }
            }
        };
        value.max(0.0)
    }

    /// Largest value `sample` can return, or infinity for the normal model.
    pub fn upper_bound(&self) -> f64 {
        match self.distribution {
            LatencyDistribution::Constant => self.base.max(0.0),
            LatencyDistribution::Uniform => (self.base + self.jitter).max(0.0),
            LatencyDistribution::NormalTruncated if self.jitter == 0.0 => self.base.max(0.0),
            LatencyDistribution::NormalTruncated => f64::INFINITY,
        }
    }
}

/// Why [`Engine::run_until`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Predicate,
    QueueEmpty,
    Deadline,
}

pub struct Engine<E> {
    now: SimTime,
    next_sequence: u64,
    heap: BinaryHeap<Scheduled<E>>,
    cancelled: BTreeSet<u64>,
    rng: ChaCha8Rng,
    log: Vec<LogRecord>,
    logging: bool,
}

impl<E> fmt::Debug for Engine<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("now", &self.now)
            .field("pending", &self.heap.len())
            .field("logged", &self.log.len())
            .finish()
    }
}

impl<E: EventKind + Serialize> Engine<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0.0,
            next_sequence: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
            logging: true,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Turns event logging off, for sweeps that only want metrics.
    pub fn set_logging(&mut self, enabled: bool) {
        self.logging = enabled;
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn sample(&mut self, model: &LatencyModel) -> f64 {
        model.sample(&mut self.rng)
    }

    fn take_sequence(&mut self) -> u64 {
        let seq = self.next_sequence;
        self.next_sequence += 1;
        seq
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<Ticket, EngineError> {
        if !fire_at.is_finite() {
            return Err(EngineError::NonFinite(fire_at));
        }
        if fire_at < self.now {
            return Err(EngineError::PastDeadline {
                fire_at,
                now: self.now,
            });
        }
        let sequence = self.take_sequence();
        self.heap.push(Scheduled {
            fire_at,
            sequence,
            payload,
        });
        Ok(Ticket(sequence))
    }

    /// Schedules `delay` seconds from now. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, delay: f64, payload: E) -> Ticket {
        let at = self.now + delay.max(0.0);
        self.schedule(at, payload)
            .expect("relative schedule is never in the past")
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, ticket: Ticket) -> bool {
        let pending = !self.cancelled.contains(&ticket.0)
            && self.heap.iter().any(|s| s.sequence == ticket.0);
        if pending {
            self.cancelled.insert(ticket.0);
        }
        pending
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending() == 0
    }

    /// Time of the next live event, if any.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.drop_cancelled_head();
        self.heap.peek().map(|s| s.fire_at)
    }

    fn drop_cancelled_head(&mut self) {
        while let Some(head) = self.heap.peek() {
            if self.cancelled.remove(&head.sequence) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next event at or before `deadline`, advancing the clock and
    /// logging it.
    pub fn next_event(&mut self, deadline: SimTime) -> Option<Delivered<E>> {
        self.drop_cancelled_head();
        let head = self.heap.peek()?;
        if head.fire_at > deadline {
            return None;
        }
        let event = self.heap.pop().expect("peeked");
        debug_assert!(event.fire_at >= self.now);
        self.now = event.fire_at;
        if self.logging {
            let (kind, payload) = split_payload(&event.payload);
            self.log.push(LogRecord {
                time: event.fire_at,
                seq: event.sequence,
                kind,
                payload,
            });
        }
        Some(Delivered {
            fire_at: event.fire_at,
            sequence: event.sequence,
            payload: event.payload,
        })
    }

    /// Advances the clock without delivering anything. Used by live serving.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Appends a non-event record (a state change observed by a handler).
    pub fn note(&mut self, kind: &str, payload: Value) {
        let seq = self.take_sequence();
        if self.logging {
            self.log.push(LogRecord {
                time: self.now,
                seq,
                kind: kind.to_string(),
                payload,
            });
        }
    }

    /// Delivers events to `handle` until `stop` holds, the queue drains or
    /// the next event lies beyond `deadline`.
    pub fn run_until<S>(
        &mut self,
        state: &mut S,
        deadline: SimTime,
        mut stop: impl FnMut(&S) -> bool,
        mut handle: impl FnMut(&mut Engine<E>, &mut S, Delivered<E>),
    ) -> (SimTime, StopReason) {
        loop {
            if stop(state) {
                return (self.now, StopReason::Predicate);
            }
            match self.peek_time() {
                None => return (self.now, StopReason::QueueEmpty),
                Some(t) if t > deadline => return (self.now, StopReason::Deadline),
                Some(_) => {}
            }
            let ev = self.next_event(deadline).expect("head checked");
            handle(self, state, ev);
        }
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }
}

fn split_payload<E: EventKind + Serialize>(event: &E) -> (String, Value) {
    let payload = match serde_json::to_value(event) {
        // Externally tagged enums serialize as {"Variant": {...}}; keep the body.
        Ok(Value::Object(map)) if map.len() == 1 => map.into_iter().next().map(|(_, v)| v).unwrap(),
        Ok(Value::String(_)) => Value::Null,
        Ok(v) => v,
        Err(_) => Value::Null,
    };
    (event.kind().to_string(), payload)
}

/// Writes records as JSON lines, optionally prefixed with a run label.
pub fn write_log<W: Write>(out: &mut W, run: Option<&str>, records: &[LogRecord]) -> io::Result<()> {
    for rec in records {
        let line = match run {
            Some(label) => serde_json::json!({
                "run": label,
                "time": rec.time,
                "seq": rec.seq,
                "kind": rec.kind,
                "payload": rec.payload,
            }),
            None => serde_json::to_value(rec).map_err(io::Error::other)?,
        };
        serde_json::to_writer(&mut *out, &line).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a log written by [`write_log`], keeping the run label if present.
pub fn read_log(text: &str) -> Result<Vec<(Option<String>, LogRecord)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut value: Value =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let run = value
            .as_object_mut()
            .and_then(|m| m.remove("run"))
            .and_then(|v| v.as_str().map(str::to_string));
        let rec: LogRecord =
            serde_json::from_value(value).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push((run, rec));
    }
    Ok(out)
}

/// Derives an independent per-run seed (splitmix64 over the inputs).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut state = seed;
    for &p in parts {
        state = splitmix(state ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
