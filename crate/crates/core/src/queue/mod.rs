//! The lead broker's queue: submission, priority ordering, whole-node
//! first-fit placement with per-socket core accounting, the strong-scaling
//! wall time model, pause/resume and archive save/restore.

mod archive;
mod fairshare;
mod hierarchy;

pub use archive::{read_archive, write_archive, RestoreAudit};
pub use fairshare::{fair_share_priority, Accounting, DEFAULT_HALF_LIFE};
pub use hierarchy::{Hierarchy, InstanceId, SubInstance, ROOT_INSTANCE};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobId, JobRecord, JobSpec, JobState, ModelError, NodeId, ResourceShape, SimTime, Slot};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error("invalid job spec: {0}")]
    InvalidSpec(#[from] ModelError),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("job {job} cannot go from {from:?} to {to:?}")]
    InvalidTransition { job: JobId, from: JobState, to: JobState },
    #[error("queue must be paused before saving")]
    NotPaused,
    #[error("archive job id {0} already present in the target queue")]
    IdCollision(JobId),
    #[error("requested slots are not free in the parent instance")]
    SlotsUnavailable,
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} still has live jobs")]
    InstanceBusy(InstanceId),
    #[error("malformed archive: {0}")]
    Archive(String),
}

/// A host a queue may place work on, keyed by broker rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub node_id: NodeId,
    pub shape: ResourceShape,
}

/// Ranks (and their discovered shapes) an instance can schedule onto.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub hosts: BTreeMap<u32, Host>,
}

impl Inventory {
    pub fn insert(&mut self, rank: u32, node_id: NodeId, shape: ResourceShape) {
        self.hosts.insert(rank, Host { node_id, shape });
    }

    pub fn uniform(ranks: impl IntoIterator<Item = u32>, shape: ResourceShape) -> Self {
        let mut inv = Self::default();
        for r in ranks {
            inv.insert(r, NodeId(r), shape);
        }
        inv
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn restrict(&self, ranks: &BTreeSet<u32>) -> Self {
        Self {
            hosts: self
                .hosts
                .iter()
                .filter(|(r, _)| ranks.contains(r))
                .map(|(r, h)| (*r, *h))
                .collect(),
        }
    }

    /// Ranks able to host `tasks_per_node` tasks, ignoring occupancy.
    pub fn capable(&self, tasks_per_node: u32) -> usize {
        self.hosts
            .values()
            .filter(|h| h.shape.total_cores() >= tasks_per_node)
            .count()
    }
}

/// Submission request; the queue assigns the id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub user: String,
    pub nodes: u32,
    pub tasks_per_node: u32,
    #[serde(default = "default_work")]
    pub work_units: f64,
    #[serde(default)]
    pub serial_fraction: f64,
    #[serde(default)]
    pub burstable: bool,
}

fn default_work() -> f64 {
    1000.0
}

impl JobRequest {
    pub fn new(user: impl Into<String>, nodes: u32, tasks_per_node: u32) -> Self {
        Self {
            user: user.into(),
            nodes,
            tasks_per_node,
            work_units: default_work(),
            serial_fraction: 0.0,
            burstable: false,
        }
    }

    pub fn with_work(mut self, work_units: f64, serial_fraction: f64) -> Self {
        self.work_units = work_units;
        self.serial_fraction = serial_fraction;
        self
    }

    pub fn burstable(mut self, burstable: bool) -> Self {
        self.burstable = burstable;
        self
    }

    fn into_spec(self, job_id: JobId) -> JobSpec {
        JobSpec {
            job_id,
            user: self.user,
            nodes: self.nodes,
            tasks_per_node: self.tasks_per_node,
            work_units: self.work_units,
            serial_fraction: self.serial_fraction,
            burstable: self.burstable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Start every pending job that fits, skipping the ones that do not.
    #[default]
    FirstFit,
    /// Stop at the first pending job that does not fit.
    StrictFifo,
}

/// What happens to a job whose rank disappears under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LostRankPolicy {
    #[default]
    Requeue,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub policy: SchedulePolicy,
    /// Per-hop latency penalty in the wall time model.
    pub alpha: f64,
    pub half_life: f64,
    pub lost_rank: LostRankPolicy,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            policy: SchedulePolicy::FirstFit,
            alpha: 0.0,
            half_life: DEFAULT_HALF_LIFE,
            lost_rank: LostRankPolicy::Requeue,
        }
    }
}

/// Wall time of `spec` on `ranks` total ranks spread over `nodes` nodes:
/// `s*T1 + (1-s)*T1/R + alpha*log2(N)`.
pub fn wall_time_model(spec: &JobSpec, ranks: u64, nodes: u32, alpha: f64) -> f64 {
    let t1 = spec.work_units;
    let s = spec.serial_fraction;
    let r = ranks.max(1) as f64;
    let n = f64::from(nodes.max(1));
    s * t1 + (1.0 - s) * t1 / r + alpha * n.log2()
}

/// [`wall_time_model`] evaluated on an allocation (one task per core).
pub fn wall_time_for(spec: &JobSpec, allocation: &[Slot], alpha: f64) -> f64 {
    let ranks: u64 = allocation.iter().map(|s| u64::from(s.cores)).sum();
    let nodes = allocation.iter().map(|s| s.rank).collect::<BTreeSet<_>>().len() as u32;
    wall_time_model(spec, ranks, nodes, alpha)
}

/// A job the cycle started, with how long this run segment lasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Started {
    pub job_id: JobId,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    start: SimTime,
    wall: f64,
}

#[derive(Debug, Clone)]
pub struct JobQueue {
    jobs: BTreeMap<JobId, JobRecord>,
    next_job_id: u64,
    paused: bool,
    segments: BTreeMap<JobId, Segment>,
    pub accounting: Accounting,
    pub config: QueueConfig,
}

impl Default for JobQueue {
    fn default() -> Self {
        Self::new(QueueConfig::default())
    }
}

impl JobQueue {
    pub fn new(config: QueueConfig) -> Self {
        Self {
            jobs: BTreeMap::new(),
            next_job_id: 1,
            paused: false,
            segments: BTreeMap::new(),
            accounting: Accounting::new(config.half_life),
            config,
        }
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn next_job_id(&self) -> u64 {
        self.next_job_id
    }

    pub fn submit(&mut self, request: JobRequest, now: SimTime) -> Result<JobId, QueueError> {
        let job_id = JobId(self.next_job_id);
        let spec = request.into_spec(job_id);
        spec.validate()?;
        if !self.accounting.knows(&spec.user) {
            self.accounting.register(&spec.user, 1.0);
        }
        self.next_job_id += 1;
        self.jobs.insert(job_id, JobRecord::new(spec, now));
        Ok(job_id)
    }

    pub fn get(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn in_state(&self, state: JobState) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values().filter(move |j| j.state == state)
    }

    pub fn count(&self, state: JobState) -> usize {
        self.in_state(state).count()
    }

    pub fn has_live_jobs(&self) -> bool {
        self.jobs
            .values()
            .any(|j| matches!(j.state, JobState::Pending | JobState::Running | JobState::Paused))
    }

    /// Ranks held by running or paused jobs.
    pub fn busy_ranks(&self) -> BTreeSet<u32> {
        self.jobs
            .values()
            .filter(|j| matches!(j.state, JobState::Running | JobState::Paused))
            .flat_map(|j| j.allocation.iter().map(|s| s.rank))
            .collect()
    }

    /// Pending job ids in scheduling order: priority descending, then
    /// submit time, then id.
    pub fn pending_order(&self, now: SimTime) -> Vec<JobId> {
        let mut pending: Vec<(f64, SimTime, JobId)> = self
            .in_state(JobState::Pending)
            .map(|j| {
                let prio = self.accounting.priority(&j.spec.user, now).unwrap_or(0.0);
                (prio, j.submit_time, j.job_id())
            })
            .collect();
        pending.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.total_cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        pending.into_iter().map(|(_, _, id)| id).collect()
    }

    fn place(spec: &JobSpec, free: &[(u32, Host)]) -> Option<Vec<Slot>> {
        let chosen: Vec<&(u32, Host)> = free
            .iter()
            .filter(|(_, h)| h.shape.total_cores() >= spec.tasks_per_node)
            .take(spec.nodes as usize)
            .collect();
        if chosen.len() < spec.nodes as usize {
            return None;
        }
        let mut slots = Vec::new();
        for (rank, host) in chosen {
            let mut left = spec.tasks_per_node;
            for socket in 0..host.shape.sockets {
                if left == 0 {
                    break;
                }
                let cores = left.min(host.shape.cores_per_socket);
                slots.push(Slot {
                    rank: *rank,
                    node_id: host.node_id,
                    socket,
                    cores,
                });
                left -= cores;
            }
        }
        Some(slots)
    }

    /// Starts pending jobs that fit entirely in the free part of `inventory`.
    pub fn schedule_cycle(&mut self, now: SimTime, inventory: &Inventory) -> Vec<Started> {
        if self.paused {
            return Vec::new();
        }
        let busy = self.busy_ranks();
        let mut free: Vec<(u32, Host)> = inventory
            .hosts
            .iter()
            .filter(|(r, _)| !busy.contains(r))
            .map(|(r, h)| (*r, *h))
            .collect();
        let mut started = Vec::new();
        for id in self.pending_order(now) {
            let spec = self.jobs[&id].spec.clone();
            match Self::place(&spec, &free) {
                Some(slots) => {
                    let used: BTreeSet<u32> = slots.iter().map(|s| s.rank).collect();
                    free.retain(|(r, _)| !used.contains(r));
                    let wall = self.start_job(id, slots, now);
                    started.push(Started { job_id: id, wall_time: wall });
                }
                None if self.config.policy == SchedulePolicy::StrictFifo => break,
                None => {}
            }
        }
        started
    }

    fn start_job(&mut self, id: JobId, slots: Vec<Slot>, now: SimTime) -> f64 {
        let alpha = self.config.alpha;
        let job = self.jobs.get_mut(&id).expect("pending job exists");
        let wall = wall_time_for(&job.spec, &slots, alpha) * job.remaining;
        job.state = JobState::Running;
        job.start_time.get_or_insert(now);
        job.allocation = slots;
        self.segments.insert(id, Segment { start: now, wall });
        wall
    }

    fn transition(&mut self, id: JobId, to: JobState) -> Result<&mut JobRecord, QueueError> {
        let job = self.jobs.get_mut(&id).ok_or(QueueError::UnknownJob(id))?;
        if !job.state.can_transition_to(to) {
            return Err(QueueError::InvalidTransition {
                job: id,
                from: job.state,
                to,
            });
        }
        Ok(job)
    }

    /// Charges the user for the segment that just ended and returns the
    /// fraction of that segment's work that was done.
    fn close_segment(&mut self, id: JobId, now: SimTime) -> f64 {
        let Some(seg) = self.segments.remove(&id) else {
            return 0.0;
        };
        let job = &self.jobs[&id];
        let elapsed = (now - seg.start).max(0.0);
        let node_seconds = f64::from(job.spec.nodes) * elapsed;
        let user = job.spec.user.clone();
        self.accounting.charge(&user, node_seconds, now);
        if seg.wall <= 0.0 {
            1.0
        } else {
            (elapsed / seg.wall).clamp(0.0, 1.0)
        }
    }

    pub fn finish(&mut self, id: JobId, now: SimTime) -> Result<&JobRecord, QueueError> {
        self.transition(id, JobState::Completed)?;
        self.close_segment(id, now);
        let job = self.jobs.get_mut(&id).expect("checked");
        job.state = JobState::Completed;
        job.end_time = Some(now);
        job.allocation.clear();
        job.remaining = 0.0;
        Ok(job)
    }

    pub fn cancel(&mut self, id: JobId, now: SimTime) -> Result<&JobRecord, QueueError> {
        let was_running = self.transition(id, JobState::Canceled)?.state == JobState::Running;
        if was_running {
            let done = self.close_segment(id, now);
            let job = self.jobs.get_mut(&id).expect("checked");
            job.remaining *= 1.0 - done;
        }
        let job = self.jobs.get_mut(&id).expect("checked");
        job.state = JobState::Canceled;
        job.end_time = Some(now);
        job.allocation.clear();
        Ok(job)
    }

    /// Stops new starts and freezes running jobs, recording how much work
    /// each still has. Returns the jobs that were paused.
    pub fn pause_queue(&mut self, now: SimTime) -> Vec<JobId> {
        self.paused = true;
        let running: Vec<JobId> = self.in_state(JobState::Running).map(|j| j.job_id()).collect();
        for &id in &running {
            let done = self.close_segment(id, now);
            let job = self.jobs.get_mut(&id).expect("running job");
            job.remaining *= 1.0 - done;
            job.state = JobState::Paused;
        }
        running
    }

    /// Lifts the pause; paused jobs continue on their allocation.
    pub fn resume_queue(&mut self, now: SimTime) -> Vec<Started> {
        self.paused = false;
        let paused: Vec<JobId> = self.in_state(JobState::Paused).map(|j| j.job_id()).collect();
        paused
            .into_iter()
            .map(|id| {
                let slots = std::mem::take(&mut self.jobs.get_mut(&id).expect("paused").allocation);
                let wall = self.start_job(id, slots, now);
                Started { job_id: id, wall_time: wall }
            })
            .collect()
    }

    /// Handles jobs holding `rank` after it disappears. Returns the jobs
    /// touched.
    pub fn release_rank(&mut self, rank: u32, now: SimTime) -> Vec<JobId> {
        let hit: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| matches!(j.state, JobState::Running | JobState::Paused))
            .filter(|j| j.allocation.iter().any(|s| s.rank == rank))
            .map(|j| j.job_id())
            .collect();
        for &id in &hit {
            // Work done in the interrupted segment is lost.
            self.close_segment(id, now);
            let policy = self.config.lost_rank;
            let job = self.jobs.get_mut(&id).expect("live job");
            job.allocation.clear();
            match policy {
                LostRankPolicy::Requeue => job.state = JobState::Pending,
                LostRankPolicy::Fail => {
                    job.state = JobState::Canceled;
                    job.end_time = Some(now);
                }
            }
        }
        hit
    }

    /// Seconds of work left for a running job at `now`, or its frozen
    /// remainder if paused.
    pub fn progress(&self, id: JobId, now: SimTime) -> Option<f64> {
        let job = self.jobs.get(&id)?;
        match self.segments.get(&id) {
            Some(seg) if seg.wall > 0.0 => {
                let done = ((now - seg.start) / seg.wall).clamp(0.0, 1.0);
                Some(1.0 - job.remaining * (1.0 - done))
            }
            _ => Some(1.0 - job.remaining),
        }
    }

    pub fn save_archive(&self, now: SimTime) -> Result<crate::model::ArchiveSnapshot, QueueError> {
        archive::save(self, now)
    }

    pub fn restore_archive(&mut self, snapshot: &crate::model::ArchiveSnapshot) -> Result<RestoreAudit, QueueError> {
        archive::restore(self, snapshot)
    }

    /// Σ nodes requested by pending jobs.
    pub fn pending_node_demand(&self) -> u64 {
        self.in_state(JobState::Pending).map(|j| u64::from(j.spec.nodes)).sum()
    }

    /// Mutable access for save/restore and the hierarchy.
    fn insert_record(&mut self, record: JobRecord) {
        self.jobs.insert(record.job_id(), record);
    }
}

/// Checks per-socket capacity across every live allocation, keyed by the
/// physical node. Returns the first overfull (node, socket) if any.
pub fn find_oversubscription<'a>(
    jobs: impl IntoIterator<Item = &'a JobRecord>,
    shapes: &BTreeMap<NodeId, ResourceShape>,
) -> Option<(NodeId, u32, u32)> {
    let mut used: BTreeMap<(NodeId, u32), u32> = BTreeMap::new();
    for job in jobs {
        if !matches!(job.state, JobState::Running | JobState::Paused) {
            continue;
        }
        for slot in &job.allocation {
            *used.entry((slot.node_id, slot.socket)).or_default() += slot.cores;
        }
    }
    used.into_iter().find_map(|((node, socket), cores)| {
        let cap = shapes.get(&node).map_or(0, |s| {
            if socket < s.sockets {
                s.cores_per_socket
            } else {
                0
            }
        });
        (cores > cap).then_some((node, socket, cores))
    })
}
