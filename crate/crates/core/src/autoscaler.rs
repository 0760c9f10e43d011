//! Horizontal scaling decisions.
//!
//! The ratio rule: keep the current size while `metric / target` is within
//! `tolerance` of one, otherwise scale to `ceil(current * metric / target)`
//! clamped to the bounds. Downscales additionally wait until every decision
//! in the stabilization window agrees.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{JobState, SimTime};
use crate::queue::JobQueue;

/// Slack for float noise on the tolerance boundary and in `ceil`.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Utilization,
    #[default]
    QueueDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalePolicy {
    pub mode: ScaleMode,
    /// Target utilization fraction, or pending node demand per node.
    pub target: f64,
    pub tolerance: f64,
    pub check_interval: f64,
    pub stabilization_window: f64,
    pub min_size: u32,
    /// Upper bound; zero means the cluster's max size.
    pub max_size: u32,
    pub enabled: bool,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        Self {
            mode: ScaleMode::QueueDepth,
            target: 1.0,
            tolerance: 0.10,
            check_interval: 15.0,
            stabilization_window: 60.0,
            min_size: 1,
            max_size: 0,
            enabled: true,
        }
    }
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.target > 0.0) {
            return Err(format!("target must be positive, got {}", self.target));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(format!("tolerance must lie in [0, 1), got {}", self.tolerance));
        }
        if !(self.check_interval > 0.0) {
            return Err("check_interval must be positive".into());
        }
        if self.stabilization_window < 0.0 {
            return Err("stabilization_window must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub at: SimTime,
    pub current_utilization: f64,
    pub pending_node_demand: u64,
    pub queue_length: u64,
}

/// The ratio rule with tolerance band and clamping to `[min, max]`.
pub fn desired_replicas(current: u32, metric: f64, target: f64, tolerance: f64, bounds: (u32, u32)) -> u32 {
    let (lo, hi) = (bounds.0.max(1), bounds.1.max(bounds.0.max(1)));
    let ratio = metric / target;
    if (ratio - 1.0).abs() <= tolerance + EPS {
        return current.clamp(lo, hi);
    }
    let raw = (f64::from(current) * ratio - EPS).ceil();
    let raw = if raw.is_finite() { raw.max(0.0) } else { f64::from(hi) };
    (raw.min(f64::from(u32::MAX)) as u32).clamp(lo, hi)
}

/// Samples the queue. Utilization is the fraction of `online` ranks held by
/// running jobs.
pub fn queue_metric(queue: &JobQueue, online: usize, now: SimTime) -> MetricSample {
    let busy = queue
        .in_state(JobState::Running)
        .map(|j| j.ranks().len())
        .sum::<usize>();
    MetricSample {
        at: now,
        current_utilization: if online == 0 { 0.0 } else { busy as f64 / online as f64 },
        pending_node_demand: queue.pending_node_demand(),
        queue_length: queue.count(JobState::Pending) as u64,
    }
}

/// The value compared against the target in each mode.
pub fn metric_value(mode: ScaleMode, sample: &MetricSample, current: u32) -> f64 {
    match mode {
        ScaleMode::Utilization => sample.current_utilization,
        ScaleMode::QueueDepth => sample.pending_node_demand as f64 / f64::from(current.max(1)),
    }
}

/// One periodic decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub at: SimTime,
    pub current: u32,
    pub metric: f64,
    pub recommended: u32,
    /// The size to request, if any.
    pub request: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Autoscaler {
    pub policy: ScalePolicy,
    max_size: u32,
    history: VecDeque<(SimTime, u32)>,
}

impl Autoscaler {
    pub fn new(policy: ScalePolicy, cluster_max: u32) -> Self {
        let max_size = if policy.max_size == 0 {
            cluster_max
        } else {
            policy.max_size.min(cluster_max)
        };
        Self {
            policy,
            max_size,
            history: VecDeque::new(),
        }
    }

    pub fn bounds(&self) -> (u32, u32) {
        (self.policy.min_size.max(1), self.max_size)
    }

    pub fn step(&mut self, sample: &MetricSample, current: u32) -> ScaleDecision {
        let metric = metric_value(self.policy.mode, sample, current);
        let recommended = desired_replicas(
            current,
            metric,
            self.policy.target,
            self.policy.tolerance,
            self.bounds(),
        );
        self.history.push_back((sample.at, recommended));
        let horizon = sample.at - self.policy.stabilization_window;
        while self.history.front().is_some_and(|&(t, _)| t < horizon - EPS) {
            self.history.pop_front();
        }
        let request = if !self.policy.enabled {
            None
        } else if recommended > current {
            Some(recommended)
        } else if recommended < current {
            let window_max = self.history.iter().map(|&(_, r)| r).max().unwrap_or(recommended);
            (window_max < current).then_some(window_max)
        } else {
            None
        };
        ScaleDecision {
            at: sample.at,
            current,
            metric,
            recommended,
            request,
        }
    }
}
