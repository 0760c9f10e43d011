//! One MiniCluster driven through the engine: the reconciler creates and
//! deletes pods, pods start brokers that bootstrap into the overlay, the lead
//! runs the queue, and the autoscaler and burst manager feed back into the
//! same resize path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autoscaler::{queue_metric, Autoscaler, MetricSample, ScalePolicy};
use crate::burst::{BurstManager, Teardown};
use crate::engine::{Engine, EventKind, LatencyModel, LogRecord, StopReason, Ticket};
use crate::model::{
    validate_catalog, validate_spec, ArchiveSnapshot, ClusterConfig, JobId, JobRecord, JobState,
    MiniClusterSpec, ModelError, NodeId, NodeSpec, ResourceShape, SimTime, ValidationError,
};
use crate::overlay::{start_role, AttemptOutcome, BrokerPhase, Overlay, RetryPolicy, Role, Topology};
use crate::queue::{
    find_oversubscription, Hierarchy, Host, InstanceId, Inventory, JobQueue, JobRequest, QueueConfig,
    QueueError, RestoreAudit, ROOT_INSTANCE,
};
use crate::reconciler::{
    assign_node, discover_resources, reconcile, request_resize, Action, BatchWidth, DesiredState,
    PodInstance, PodPhase, ResizeError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    /// The lead broker's node also runs work.
    #[default]
    EmbeddedLead,
    /// Rank 0 only launches; workers are ranks 1..size.
    ExternalLauncher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Latencies {
    /// Scheduling to container running.
    pub pod_create: LatencyModel,
    pub pod_terminate: LatencyModel,
    /// Container running to follower broker process up.
    pub broker_start: LatencyModel,
    /// One network round to the parent broker.
    pub connect: LatencyModel,
    pub node_provision: LatencyModel,
    pub image_pull: LatencyModel,
    /// Accepted spec change to the reconcile pass.
    pub reconcile: LatencyModel,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            pod_create: LatencyModel::uniform("pod_create", 3.0, 2.0),
            pod_terminate: LatencyModel::constant("pod_terminate", 1.0),
            broker_start: LatencyModel::constant("broker_start", 0.5),
            connect: LatencyModel::constant("connect", 0.05),
            node_provision: LatencyModel::constant("node_provision", 60.0),
            image_pull: LatencyModel::constant("image_pull", 30.0),
            reconcile: LatencyModel::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub image_pull: bool,
    /// Nodes keep a pulled image for good.
    pub pull_cache: bool,
    /// Nodes are provisioned when a pod first needs them and released when
    /// it goes. `None` follows whether autoscaling is on.
    pub on_demand_nodes: Option<bool>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            image_pull: false,
            pull_cache: true,
            on_demand_nodes: None,
        }
    }
}

/// The job the lead submits once the cluster is full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntryJob {
    pub user: Option<String>,
    /// Defaults to every worker rank.
    pub nodes: Option<u32>,
    pub tasks_per_node: u32,
    pub work_units: f64,
    pub serial_fraction: f64,
}

impl Default for EntryJob {
    fn default() -> Self {
        Self {
            user: None,
            nodes: None,
            tasks_per_node: 1,
            work_units: 1000.0,
            serial_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub spec: MiniClusterSpec,
    pub catalog: Vec<NodeSpec>,
    pub anti_affinity: bool,
    pub batch_width: BatchWidth,
    pub retry: RetryPolicy,
    pub topology: Topology,
    pub max_secret_attempts: u32,
    /// Secret handed to local followers instead of the cluster's own.
    pub follower_secret: Option<Vec<u8>>,
    pub latencies: Latencies,
    /// Extra delay before the lead broker listens.
    pub lead_delay: f64,
    pub queue: QueueConfig,
    pub share_weights: BTreeMap<String, f64>,
    pub scale: Option<ScalePolicy>,
    pub costs: CostModel,
    pub launch_mode: LaunchMode,
    pub entry_job: EntryJob,
    /// Delete the cluster once all work is done.
    pub delete_when_done: bool,
    pub check_invariants: bool,
    /// Nodes whose image cache is already warm.
    pub warm_pull_cache: BTreeSet<NodeId>,
}

impl SimConfig {
    pub fn new(spec: MiniClusterSpec, catalog: Vec<NodeSpec>) -> Self {
        Self {
            spec,
            catalog,
            anti_affinity: true,
            batch_width: BatchWidth::UNLIMITED,
            retry: RetryPolicy::default(),
            topology: Topology::Flat,
            max_secret_attempts: crate::overlay::DEFAULT_MAX_SECRET_ATTEMPTS,
            follower_secret: None,
            latencies: Latencies::default(),
            lead_delay: 0.0,
            queue: QueueConfig::default(),
            share_weights: BTreeMap::new(),
            scale: None,
            costs: CostModel::default(),
            launch_mode: LaunchMode::EmbeddedLead,
            entry_job: EntryJob::default(),
            delete_when_done: true,
            check_invariants: false,
            warm_pull_cache: BTreeSet::new(),
        }
    }

    /// `count` identical nodes named `node<i>`.
    pub fn uniform_catalog(count: u32, shape: ResourceShape) -> Vec<NodeSpec> {
        (0..count)
            .map(|i| NodeSpec {
                node_id: NodeId(i),
                hostname: format!("node{i}"),
                shape,
            })
            .collect()
    }

    fn on_demand(&self) -> bool {
        self.costs.on_demand_nodes.unwrap_or(self.scale.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid spec: {0:?}")]
    Spec(Vec<ValidationError>),
    #[error("invalid catalog: {0}")]
    Catalog(#[from] ModelError),
    #[error("invalid scale policy: {0}")]
    Scale(String),
    #[error("{0}")]
    Engine(#[from] crate::engine::EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEvent {
    Reconcile { generation: u64 },
    PodCreated { index: u32, node: NodeId, incarnation: u64 },
    PodTerminated { index: u32 },
    LeadListening,
    BrokerStart { rank: u32 },
    BrokerConnectAttempt { rank: u32, epoch: u64, attempt: u32 },
    BrokerOnline { rank: u32, epoch: u64 },
    JobSubmit { request: JobRequest },
    JobFinished { instance: InstanceId, job: JobId },
    ScaleCheck,
    BurstProvisioned { burst: u32 },
    Resize { size: i64 },
    PodCrash { index: u32 },
    DeleteCluster,
}

impl EventKind for SimEvent {
    fn kind(&self) -> &'static str {
        match self {
            SimEvent::Reconcile { .. } => "reconcile",
            SimEvent::PodCreated { .. } => "pod_created",
            SimEvent::PodTerminated { .. } => "pod_terminated",
            SimEvent::LeadListening => "lead_listening",
            SimEvent::BrokerStart { .. } => "broker_start",
            SimEvent::BrokerConnectAttempt { .. } => "broker_connect_attempt",
            SimEvent::BrokerOnline { .. } => "broker_online",
            SimEvent::JobSubmit { .. } => "job_submit",
            SimEvent::JobFinished { .. } => "job_finished",
            SimEvent::ScaleCheck => "scale_check",
            SimEvent::BurstProvisioned { .. } => "burst_provisioned",
            SimEvent::Resize { .. } => "resize",
            SimEvent::PodCrash { .. } => "pod_crash",
            SimEvent::DeleteCluster => "delete_cluster",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostClass {
    OneTime,
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Provision,
    ImagePull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub at: SimTime,
    pub class: CostClass,
    pub kind: CostKind,
    pub node: NodeId,
    pub seconds: f64,
}

/// Billing by node: a node is held from provisioning until release.
#[derive(Debug, Clone, Default)]
struct NodeLedger {
    held: BTreeMap<NodeId, SimTime>,
    billed: BTreeSet<NodeId>,
    seconds: f64,
}

impl NodeLedger {
    fn acquire(&mut self, node: NodeId, now: SimTime) -> bool {
        if self.held.contains_key(&node) {
            return false;
        }
        self.held.insert(node, now);
        self.billed.insert(node);
        true
    }

    fn release(&mut self, node: NodeId, now: SimTime) {
        if let Some(since) = self.held.remove(&node) {
            self.seconds += now - since;
        }
    }

    fn close(&mut self, now: SimTime) {
        for since in std::mem::take(&mut self.held).into_values() {
            self.seconds += now - since;
        }
    }

    fn seconds_at(&self, now: SimTime) -> f64 {
        self.seconds + self.held.values().map(|s| now - s).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub cluster_full_at: Option<SimTime>,
    pub entry_submit: Option<SimTime>,
    pub entry_start: Option<SimTime>,
    pub entry_end: Option<SimTime>,
    pub delete_start: Option<SimTime>,
    pub delete_end: Option<SimTime>,
}

/// Measurements of one finished (or stopped) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Worker ranks.
    pub workers: u32,
    pub ranks: u64,
    pub creation_time: Option<f64>,
    pub deletion_time: Option<f64>,
    pub launcher_time: Option<f64>,
    pub wall_time: Option<f64>,
    pub node_seconds: f64,
    pub billed_nodes: usize,
    pub one_time_costs: usize,
    pub repeated_costs: usize,
    pub one_time_seconds: f64,
    pub repeated_seconds: f64,
    pub end_time: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResizeRejection {
    #[error(transparent)]
    OutOfBounds(#[from] ResizeError),
    #[error("rank {0} is held by a burst")]
    RanksReserved(u32),
    #[error("cluster is being deleted")]
    Deleting,
}

/// Mutations from outside the event loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Submit(JobRequest),
    /// `user` set means the caller may only cancel their own jobs.
    Cancel { job: JobId, user: Option<String> },
    Resize(i64),
    Pause,
    Resume,
    Save,
    Restore(ArchiveSnapshot),
    Spawn { parent: InstanceId, ranks: BTreeSet<u32> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("job {0} belongs to another user")]
    Forbidden(JobId),
    #[error(transparent)]
    Resize(#[from] ResizeRejection),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Submitted(JobId),
    Canceled(JobRecord),
    Resized { generation: u64, size: u32 },
    Paused(Vec<JobId>),
    Resumed(usize),
    Saved(ArchiveSnapshot),
    Restored(RestoreAudit),
    Spawned(InstanceId),
    Failed(CommandError),
}

/// All simulation state the engine loop owns.
#[derive(Debug)]
pub struct World {
    cfg: SimConfig,
    desired: DesiredState,
    config: ClusterConfig,
    pods: BTreeMap<u32, PodInstance>,
    incarnations: BTreeMap<u32, u64>,
    overlay: Overlay,
    hosts: BTreeMap<u32, Host>,
    hierarchy: Hierarchy,
    autoscaler: Option<Autoscaler>,
    burst: BurstManager,
    finish_tickets: BTreeMap<(InstanceId, JobId), Ticket>,
    nodes: NodeLedger,
    pull_cache: BTreeSet<NodeId>,
    costs: Vec<CostEntry>,
    times: Timeline,
    auto_submit: Option<String>,
    lead_started: bool,
    full: bool,
    ever_full: bool,
    deleting: bool,
    deleted: bool,
    outstanding: usize,
    entry_job: Option<JobId>,
    refused: BTreeSet<JobId>,
    violations: Vec<String>,
}

impl World {
    pub fn spec(&self) -> &MiniClusterSpec {
        &self.desired.spec
    }

    pub fn desired(&self) -> &DesiredState {
        &self.desired
    }

    pub fn cluster_config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn sim_config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodInstance> {
        self.pods.values()
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn membership(&self) -> BTreeMap<u32, BrokerPhase> {
        self.overlay.membership()
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn queue(&self) -> &JobQueue {
        self.hierarchy.root()
    }

    pub fn burst(&self) -> &BurstManager {
        &self.burst
    }

    pub fn costs(&self) -> &[CostEntry] {
        &self.costs
    }

    pub fn timeline(&self) -> Timeline {
        self.times
    }

    pub fn entry_job(&self) -> Option<JobId> {
        self.entry_job
    }

    pub fn pull_cache(&self) -> &BTreeSet<NodeId> {
        &self.pull_cache
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn is_deleted(&self) -> bool {
        self.deleted
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// Discovered resources per rank.
    pub fn hosts(&self) -> &BTreeMap<u32, Host> {
        &self.hosts
    }

    fn first_worker(&self) -> u32 {
        match self.cfg.launch_mode {
            LaunchMode::EmbeddedLead => 0,
            LaunchMode::ExternalLauncher => 1,
        }
    }

    pub fn workers(&self) -> u32 {
        self.desired.spec.size.saturating_sub(self.first_worker())
    }

    /// Online worker ranks the queue may use right now.
    pub fn job_inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        for (&rank, host) in &self.hosts {
            if rank < self.first_worker() || !self.overlay.is_online(rank) {
                continue;
            }
            if self.pods.get(&rank).is_some_and(|p| p.phase == PodPhase::Terminating) {
                continue;
            }
            inv.insert(rank, host.node_id, host.shape);
        }
        inv
    }

    pub fn metric_sample(&self, now: SimTime) -> MetricSample {
        queue_metric(self.hierarchy.root(), self.job_inventory().len(), now)
    }

    pub fn report(&self, now: SimTime) -> RunReport {
        let t = self.times;
        let entry = self.entry_job.and_then(|id| self.queue().get(id));
        let (mut one, mut rep) = ((0, 0.0), (0, 0.0));
        for c in &self.costs {
            let slot = match c.class {
                CostClass::OneTime => &mut one,
                CostClass::Repeated => &mut rep,
            };
            slot.0 += 1;
            slot.1 += c.seconds;
        }
        RunReport {
            workers: self.workers(),
            ranks: entry.map_or(0, |j| j.spec.total_ranks()),
            creation_time: t.cluster_full_at,
            deletion_time: t.delete_start.zip(t.delete_end).map(|(a, b)| b - a),
            launcher_time: t.entry_submit.zip(t.entry_end).map(|(a, b)| b - a),
            wall_time: t.entry_start.zip(t.entry_end).map(|(a, b)| b - a),
            node_seconds: self.nodes.seconds_at(now),
            billed_nodes: self.nodes.billed.len(),
            one_time_costs: one.0,
            repeated_costs: rep.0,
            one_time_seconds: one.1,
            repeated_seconds: rep.1,
            end_time: now,
        }
    }

    fn handle(&mut self, eng: &mut Engine<SimEvent>, event: SimEvent) {
        match event {
            SimEvent::Reconcile { generation } => self.on_reconcile(eng, generation),
            SimEvent::PodCreated { index, node, incarnation } => self.on_pod_created(eng, index, node, incarnation),
            SimEvent::PodTerminated { index } => self.on_pod_terminated(eng, index),
            SimEvent::LeadListening => self.on_lead_listening(eng),
            SimEvent::BrokerStart { rank } => self.on_broker_start(eng, rank),
            SimEvent::BrokerConnectAttempt { rank, epoch, attempt } => self.on_attempt(eng, rank, epoch, attempt),
            SimEvent::BrokerOnline { rank, epoch } => self.on_connected(eng, rank, epoch),
            SimEvent::JobSubmit { request } => {
                self.outstanding = self.outstanding.saturating_sub(1);
                match self.hierarchy.root_mut().submit(request, eng.now()) {
                    Ok(id) => eng.note("job_accepted", json!({ "job": id })),
                    Err(e) => eng.note("job_rejected", json!({ "error": e.to_string() })),
                }
                self.schedule_jobs(eng);
                self.maybe_delete(eng);
            }
            SimEvent::JobFinished { instance, job } => self.on_job_finished(eng, instance, job),
            SimEvent::ScaleCheck => self.on_scale_check(eng),
            SimEvent::BurstProvisioned { burst } => self.on_burst_provisioned(eng, burst),
            SimEvent::Resize { size } => {
                self.outstanding = self.outstanding.saturating_sub(1);
                let _ = self.resize(eng, size, "scenario");
                self.maybe_delete(eng);
            }
            SimEvent::PodCrash { index } => {
                self.outstanding = self.outstanding.saturating_sub(1);
                self.on_pod_crash(eng, index);
                self.maybe_delete(eng);
            }
            SimEvent::DeleteCluster => {
                self.outstanding = self.outstanding.saturating_sub(1);
                self.begin_delete(eng);
            }
        }
        if self.cfg.check_invariants {
            self.check_invariants(eng.now());
        }
    }

    fn on_reconcile(&mut self, eng: &mut Engine<SimEvent>, generation: u64) {
        if generation != self.desired.generation {
            eng.note(
                "stale_plan_discarded",
                json!({ "generation": generation, "current": self.desired.generation }),
            );
            return;
        }
        if self.deleting {
            return;
        }
        let unplaced: Vec<u32> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending && p.index < self.desired.spec.size)
            .map(|p| p.index)
            .collect();
        for index in unplaced {
            self.place_pod(eng, index);
        }
        let observed: Vec<PodInstance> = self.pods.values().cloned().collect();
        let mut last_terminated: Option<u32> = None;
        for action in reconcile(&observed, &self.desired, self.cfg.batch_width) {
            match action {
                Action::Create(index) => {
                    let mut pod = PodInstance::new(index, PodPhase::Pending);
                    pod.created_at = eng.now();
                    self.pods.insert(index, pod);
                    eng.note("pod_create", json!({ "index": index, "generation": generation }));
                    self.place_pod(eng, index);
                }
                Action::Terminate(index) => {
                    if last_terminated.is_some_and(|prev| index >= prev) {
                        self.violations.push(format!("terminate {index} after {last_terminated:?}"));
                    }
                    last_terminated = Some(index);
                    self.terminate_pod(eng, index);
                }
            }
        }
    }

    fn cost_class(&self) -> CostClass {
        if self.ever_full || self.desired.generation > 1 {
            CostClass::Repeated
        } else {
            CostClass::OneTime
        }
    }

    fn record_cost(&mut self, eng: &mut Engine<SimEvent>, class: CostClass, kind: CostKind, node: NodeId, seconds: f64) {
        let entry = CostEntry {
            at: eng.now(),
            class,
            kind,
            node,
            seconds,
        };
        eng.note("cost", serde_json::to_value(&entry).unwrap_or_default());
        self.costs.push(entry);
    }

    fn place_pod(&mut self, eng: &mut Engine<SimEvent>, index: u32) {
        let placed: Vec<PodInstance> = self.pods.values().cloned().collect();
        let pod = self.pods[&index].clone();
        let node = match assign_node(&pod, &self.cfg.catalog, &placed, self.cfg.anti_affinity) {
            Ok(node) => node,
            Err(e) => {
                eng.note("pod_unschedulable", json!({ "index": index, "error": e.to_string() }));
                return;
            }
        };
        let now = eng.now();
        let class = self.cost_class();
        let mut delay = eng.sample(&self.cfg.latencies.pod_create);
        if self.nodes.acquire(node, now) {
            let secs = eng.sample(&self.cfg.latencies.node_provision);
            self.record_cost(eng, class, CostKind::Provision, node, secs);
            if self.cfg.on_demand() {
                delay += secs;
            }
        }
        if self.cfg.costs.image_pull && !(self.cfg.costs.pull_cache && self.pull_cache.contains(&node)) {
            let secs = eng.sample(&self.cfg.latencies.image_pull);
            self.record_cost(eng, class, CostKind::ImagePull, node, secs);
            delay += secs;
            if self.cfg.costs.pull_cache {
                self.pull_cache.insert(node);
            }
        }
        let incarnation = {
            let n = self.incarnations.entry(index).or_insert(0);
            *n += 1;
            *n
        };
        let pod = self.pods.get_mut(&index).expect("pod exists");
        pod.node_id = Some(node);
        pod.phase = PodPhase::Creating;
        eng.note("pod_scheduled", json!({ "index": index, "node": node }));
        eng.schedule_in(delay, SimEvent::PodCreated { index, node, incarnation });
    }

    fn terminate_pod(&mut self, eng: &mut Engine<SimEvent>, index: u32) {
        if index == 0 && !self.deleting {
            self.violations.push("terminate issued for index 0 while the cluster exists".into());
        }
        let Some(pod) = self.pods.get_mut(&index) else {
            return;
        };
        pod.phase = PodPhase::Terminating;
        eng.note("pod_terminate", json!({ "index": index }));
        let delay = eng.sample(&self.cfg.latencies.pod_terminate);
        eng.schedule_in(delay, SimEvent::PodTerminated { index });
    }

    fn on_pod_created(&mut self, eng: &mut Engine<SimEvent>, index: u32, node: NodeId, incarnation: u64) {
        if self.incarnations.get(&index) != Some(&incarnation) {
            return;
        }
        let Some(pod) = self.pods.get_mut(&index) else {
            return;
        };
        if pod.phase != PodPhase::Creating || pod.node_id != Some(node) {
            return;
        }
        pod.phase = PodPhase::Running;
        pod.ready_at = Some(eng.now());
        let pod = pod.clone();
        if let Ok(shape) = discover_resources(&pod, &self.cfg.catalog) {
            self.hosts.insert(index, Host { node_id: node, shape });
        }
        if index == 0 {
            eng.schedule_in(self.cfg.lead_delay, SimEvent::LeadListening);
        } else {
            let delay = eng.sample(&self.cfg.latencies.broker_start);
            eng.schedule_in(delay, SimEvent::BrokerStart { rank: index });
        }
        if self.cfg.batch_width.0.is_some() {
            eng.schedule_in(0.0, SimEvent::Reconcile { generation: self.desired.generation });
        }
    }

    fn on_lead_listening(&mut self, eng: &mut Engine<SimEvent>) {
        if self.pods.get(&0).is_none_or(|p| p.phase != PodPhase::Running) {
            return;
        }
        self.overlay.start_lead();
        let role = start_role(0, &self.config, self.desired.spec.interactive);
        eng.note("broker_joined", json!({ "rank": 0, "role": role }));
        if let Role::Lead { auto_submit } = role {
            if !self.lead_started {
                self.auto_submit = auto_submit;
            }
        }
        if !self.lead_started {
            self.lead_started = true;
            if let Some(scale) = &self.cfg.scale {
                eng.schedule_in(scale.check_interval, SimEvent::ScaleCheck);
            }
        }
        self.check_full(eng);
        self.schedule_jobs(eng);
    }

    fn broker_secret(&self, rank: u32) -> Vec<u8> {
        if let Some(remote) = self.burst.live_remotes().find(|r| r.ranks.contains(&rank)) {
            return remote.secret.clone();
        }
        self.cfg
            .follower_secret
            .clone()
            .unwrap_or_else(|| self.config.secret.clone())
    }

    fn rank_backed(&self, rank: u32) -> bool {
        self.pods.get(&rank).is_some_and(|p| p.phase == PodPhase::Running)
            || self.burst.live_remotes().any(|r| r.ranks.contains(&rank))
    }

    fn on_broker_start(&mut self, eng: &mut Engine<SimEvent>, rank: u32) {
        if !self.rank_backed(rank) {
            return;
        }
        let secret = self.broker_secret(rank);
        if let Ok(epoch) = self.overlay.begin_bootstrap(rank, &secret, eng.now()) {
            eng.schedule_in(0.0, SimEvent::BrokerConnectAttempt { rank, epoch, attempt: 0 });
        }
    }

    fn on_attempt(&mut self, eng: &mut Engine<SimEvent>, rank: u32, epoch: u64, attempt: u32) {
        match self.overlay.on_attempt(rank, epoch, attempt, eng.now()) {
            AttemptOutcome::Admitted => {
                let delay = eng.sample(&self.cfg.latencies.connect);
                eng.schedule_in(delay, SimEvent::BrokerOnline { rank, epoch });
            }
            AttemptOutcome::Retry { at, attempt } => {
                let _ = eng.schedule(at, SimEvent::BrokerConnectAttempt { rank, epoch, attempt });
            }
            AttemptOutcome::GaveUp => {
                eng.note("secret_mismatch", json!({ "rank": rank, "attempts": attempt + 1 }));
            }
            AttemptOutcome::Stale => {}
        }
    }

    fn on_connected(&mut self, eng: &mut Engine<SimEvent>, rank: u32, epoch: u64) {
        match self.overlay.on_connected(rank, epoch, eng.now()) {
            AttemptOutcome::Admitted => {
                let parent = self.overlay.broker(rank).and_then(|b| b.parent_rank);
                eng.note(
                    "broker_joined",
                    json!({ "rank": rank, "parent": parent, "role": start_role(rank, &self.config, true) }),
                );
                self.check_full(eng);
                self.schedule_jobs(eng);
            }
            AttemptOutcome::Retry { at, attempt } => {
                let _ = eng.schedule(at, SimEvent::BrokerConnectAttempt { rank, epoch, attempt });
            }
            AttemptOutcome::GaveUp | AttemptOutcome::Stale => {}
        }
    }

    fn check_full(&mut self, eng: &mut Engine<SimEvent>) {
        let full = !self.deleting && (0..self.desired.spec.size).all(|r| self.overlay.is_online(r));
        if full && !self.full {
            eng.note("cluster_full", json!({ "size": self.desired.spec.size }));
            if !self.ever_full {
                self.ever_full = true;
                self.times.cluster_full_at = Some(eng.now());
                self.submit_entry(eng);
                self.maybe_delete(eng);
            }
        }
        self.full = full;
    }

    fn submit_entry(&mut self, eng: &mut Engine<SimEvent>) {
        let Some(command) = self.auto_submit.clone() else {
            return;
        };
        let e = &self.cfg.entry_job;
        let user = e
            .user
            .clone()
            .or_else(|| self.desired.spec.users.first().map(|u| u.username.clone()))
            .unwrap_or_else(|| "flux".to_string());
        let request = JobRequest::new(user, e.nodes.unwrap_or(self.workers()).max(1), e.tasks_per_node)
            .with_work(e.work_units, e.serial_fraction);
        match self.hierarchy.root_mut().submit(request, eng.now()) {
            Ok(id) => {
                self.entry_job = Some(id);
                self.times.entry_submit = Some(eng.now());
                eng.note("entry_submitted", json!({ "job": id, "command": command }));
            }
            Err(e) => eng.note("job_rejected", json!({ "error": e.to_string() })),
        }
    }

    fn schedule_jobs(&mut self, eng: &mut Engine<SimEvent>) {
        if !self.lead_started || self.deleting {
            return;
        }
        let now = eng.now();
        let inventory = self.job_inventory();
        for (instance, started) in self.hierarchy.schedule_all(now, &inventory) {
            let job = started.job_id;
            let ticket = eng.schedule_in(started.wall_time, SimEvent::JobFinished { instance, job });
            self.finish_tickets.insert((instance, job), ticket);
            let ranks = self
                .hierarchy
                .queue(instance)
                .ok()
                .and_then(|q| q.get(job))
                .map(|j| j.ranks())
                .unwrap_or_default();
            eng.note(
                "job_started",
                json!({ "instance": instance, "job": job, "wall_time": started.wall_time, "ranks": ranks }),
            );
            if instance == ROOT_INSTANCE && Some(job) == self.entry_job && self.times.entry_start.is_none() {
                self.times.entry_start = Some(now);
            }
        }
        self.burst_pass(eng);
    }

    fn local_capable(&self, tasks_per_node: u32) -> u32 {
        (self.first_worker()..self.desired.spec.size)
            .filter(|r| {
                let shape = self.hosts.get(r).map_or(self.desired.spec.pod_resources, |h| h.shape);
                shape.total_cores() >= tasks_per_node
            })
            .count() as u32
    }

    fn burst_pass(&mut self, eng: &mut Engine<SimEvent>) {
        if !self.burst.has_plugins() {
            return;
        }
        let (assignments, refused) = self.burst.burst_check(self.hierarchy.root(), |t| self.local_capable(t));
        for job in refused {
            if self.refused.insert(job) {
                eng.note("no_plugin_satisfiable", json!({ "job": job }));
            }
        }
        let local: BTreeSet<u32> = self.pods.keys().copied().collect();
        for a in assignments {
            let Some(spec) = self.hierarchy.root().get(a.job).map(|j| j.spec.clone()) else {
                continue;
            };
            let name = self.desired.spec.name.clone();
            let result = self.burst.execute_burst(
                &a,
                &spec,
                &self.config,
                &name,
                self.desired.spec.size,
                &local,
            );
            match result {
                Ok((id, latency)) => {
                    let secs = eng.sample(&latency);
                    let remote = self.burst.remote(id).expect("just created").clone();
                    eng.note(
                        "burst_started",
                        json!({
                            "burst": id,
                            "job": a.job,
                            "plugin": remote.plugin,
                            "ranks": [remote.ranks.start, remote.ranks.end],
                            "lead": remote.lead,
                        }),
                    );
                    for node in &remote.nodes {
                        self.nodes.acquire(node.node_id, eng.now());
                        self.record_cost(eng, CostClass::Repeated, CostKind::Provision, node.node_id, secs);
                    }
                    eng.schedule_in(secs, SimEvent::BurstProvisioned { burst: id });
                }
                Err(e) => {
                    if self.refused.insert(a.job) {
                        eng.note("burst_failed", json!({ "job": a.job, "error": e.to_string() }));
                    }
                }
            }
        }
    }

    fn on_burst_provisioned(&mut self, eng: &mut Engine<SimEvent>, burst: u32) {
        let Some(remote) = self.burst.mark_joined(burst).cloned() else {
            return;
        };
        if remote.state != crate::burst::RemoteState::Joined {
            return;
        }
        eng.note("burst_joined", json!({ "burst": burst, "hostnames": remote.hostnames }));
        for (rank, node) in remote.ranks.clone().zip(&remote.nodes) {
            self.hosts.insert(
                rank,
                Host {
                    node_id: node.node_id,
                    shape: node.shape,
                },
            );
            let delay = eng.sample(&self.cfg.latencies.broker_start);
            eng.schedule_in(delay, SimEvent::BrokerStart { rank });
        }
    }

    fn try_teardowns(&mut self, eng: &mut Engine<SimEvent>, force: bool) {
        let ids: Vec<(u32, JobId)> = self.burst.live_remotes().map(|r| (r.id, r.job)).collect();
        for (id, job) in ids {
            let done = self
                .hierarchy
                .root()
                .get(job)
                .is_none_or(|j| j.state.is_terminal());
            if !done && !force {
                continue;
            }
            let busy: BTreeSet<u32> = self
                .hierarchy
                .ids()
                .into_iter()
                .filter_map(|i| self.hierarchy.queue(i).ok().map(|q| q.busy_ranks()))
                .flatten()
                .collect();
            match self.burst.teardown(id, &busy) {
                Ok(Teardown::Released(ranks)) => {
                    let nodes = self.burst.remote(id).map(|r| r.nodes.clone()).unwrap_or_default();
                    for rank in ranks.clone() {
                        self.hosts.remove(&rank);
                        let orphans = self.overlay.on_leave(rank, false);
                        self.reconnect(eng, orphans);
                    }
                    for node in nodes {
                        self.nodes.release(node.node_id, eng.now());
                    }
                    eng.note("burst_teardown", json!({ "burst": id, "ranks": [ranks.start, ranks.end] }));
                }
                Ok(Teardown::AlreadyTornDown) => {
                    eng.note("burst_teardown_noop", json!({ "burst": id }));
                }
                Err(e) => eng.note("burst_teardown_deferred", json!({ "burst": id, "error": e.to_string() })),
            }
        }
    }

    /// Requests a second teardown of a remote; the event log records the
    /// no-op.
    pub fn teardown_remote(&mut self, eng: &mut Engine<SimEvent>, id: u32) -> Result<Teardown, crate::burst::BurstError> {
        let busy: BTreeSet<u32> = self.hierarchy.root().busy_ranks();
        let out = self.burst.teardown(id, &busy)?;
        if out == Teardown::AlreadyTornDown {
            eng.note("burst_teardown_noop", json!({ "burst": id }));
        }
        Ok(out)
    }

    fn reconnect(&mut self, eng: &mut Engine<SimEvent>, orphans: Vec<u32>) {
        for rank in orphans {
            if let Some(epoch) = self.overlay.rebootstrap(rank, eng.now()) {
                eng.schedule_in(0.0, SimEvent::BrokerConnectAttempt { rank, epoch, attempt: 0 });
            }
        }
    }

    fn release_jobs_on(&mut self, eng: &mut Engine<SimEvent>, rank: u32) {
        let now = eng.now();
        for instance in self.hierarchy.ids() {
            let Ok(queue) = self.hierarchy.queue_mut(instance) else {
                continue;
            };
            for job in queue.release_rank(rank, now) {
                if let Some(t) = self.finish_tickets.remove(&(instance, job)) {
                    eng.cancel(t);
                }
                let state = queue.get(job).map(|j| j.state);
                eng.note("job_interrupted", json!({ "instance": instance, "job": job, "state": state }));
            }
        }
    }

    fn on_pod_terminated(&mut self, eng: &mut Engine<SimEvent>, index: u32) {
        if self.pods.get(&index).is_none_or(|p| p.phase != PodPhase::Terminating) {
            return;
        }
        let pod = self.pods.remove(&index).expect("checked");
        self.hosts.remove(&index);
        let orphans = self.overlay.on_leave(index, false);
        self.reconnect(eng, orphans);
        self.release_jobs_on(eng, index);
        if let Some(node) = pod.node_id {
            if self.cfg.on_demand() {
                self.nodes.release(node, eng.now());
            }
        }
        if self.deleting {
            self.continue_delete(eng);
            return;
        }
        eng.schedule_in(0.0, SimEvent::Reconcile { generation: self.desired.generation });
        self.check_full(eng);
        self.schedule_jobs(eng);
    }

    fn on_pod_crash(&mut self, eng: &mut Engine<SimEvent>, index: u32) {
        if index == 0 || self.deleting {
            return;
        }
        if self.pods.get(&index).is_none_or(|p| p.phase != PodPhase::Running) {
            return;
        }
        let pod = self.pods.remove(&index).expect("checked");
        self.hosts.remove(&index);
        eng.note("pod_lost", json!({ "index": index, "node": pod.node_id }));
        let orphans = self.overlay.on_leave(index, true);
        self.reconnect(eng, orphans);
        self.release_jobs_on(eng, index);
        if let Some(node) = pod.node_id {
            if self.cfg.on_demand() {
                self.nodes.release(node, eng.now());
            }
        }
        eng.schedule_in(0.0, SimEvent::Reconcile { generation: self.desired.generation });
        self.check_full(eng);
        self.schedule_jobs(eng);
    }

    fn on_job_finished(&mut self, eng: &mut Engine<SimEvent>, instance: InstanceId, job: JobId) {
        self.finish_tickets.remove(&(instance, job));
        let now = eng.now();
        let Ok(queue) = self.hierarchy.queue_mut(instance) else {
            return;
        };
        if queue.finish(job, now).is_err() {
            return;
        }
        eng.note("job_completed", json!({ "instance": instance, "job": job }));
        if instance == ROOT_INSTANCE && Some(job) == self.entry_job {
            self.times.entry_end = Some(now);
        }
        self.try_teardowns(eng, false);
        self.schedule_jobs(eng);
        self.maybe_delete(eng);
    }

    fn on_scale_check(&mut self, eng: &mut Engine<SimEvent>) {
        if self.deleting {
            return;
        }
        let now = eng.now();
        let sample = self.metric_sample(now);
        let current = self.desired.spec.size;
        let Some(scaler) = self.autoscaler.as_mut() else {
            return;
        };
        let decision = scaler.step(&sample, current);
        let interval = scaler.policy.check_interval;
        eng.note("scale_decision", serde_json::to_value(&decision).unwrap_or_default());
        if let Some(size) = decision.request {
            let _ = self.resize(eng, i64::from(size), "autoscaler");
        }
        eng.schedule_in(interval, SimEvent::ScaleCheck);
    }

    /// The single resize path shared by scenario scripts, the API and the
    /// autoscaler.
    pub fn resize(&mut self, eng: &mut Engine<SimEvent>, size: i64, origin: &str) -> Result<u64, ResizeRejection> {
        let result = self.validate_resize(size);
        match &result {
            Ok(next) => {
                self.desired = next.clone();
                eng.note(
                    "resize_accepted",
                    json!({ "origin": origin, "size": size, "generation": next.generation }),
                );
                let delay = eng.sample(&self.cfg.latencies.reconcile);
                eng.schedule_in(delay, SimEvent::Reconcile { generation: next.generation });
                self.check_full(eng);
            }
            Err(e) => eng.note(
                "resize_rejected",
                json!({ "origin": origin, "size": size, "reason": e.to_string() }),
            ),
        }
        result.map(|d| d.generation)
    }

    fn validate_resize(&self, size: i64) -> Result<DesiredState, ResizeRejection> {
        if self.deleting {
            return Err(ResizeRejection::Deleting);
        }
        let next = request_resize(&self.desired, size)?;
        if let Some(&rank) = self
            .burst
            .reserved_ranks()
            .iter()
            .find(|&&r| r < next.spec.size)
        {
            return Err(ResizeRejection::RanksReserved(rank));
        }
        Ok(next)
    }

    fn maybe_delete(&mut self, eng: &mut Engine<SimEvent>) {
        if !self.cfg.delete_when_done || self.deleting || !self.ever_full || self.outstanding > 0 {
            return;
        }
        if self.auto_submit.is_some() && self.entry_job.is_none() {
            return;
        }
        let live = self
            .hierarchy
            .ids()
            .into_iter()
            .any(|i| self.hierarchy.queue(i).is_ok_and(|q| q.has_live_jobs()));
        if !live {
            self.begin_delete(eng);
        }
    }

    fn begin_delete(&mut self, eng: &mut Engine<SimEvent>) {
        if self.deleting {
            return;
        }
        self.deleting = true;
        self.full = false;
        let now = eng.now();
        self.times.delete_start = Some(now);
        eng.note("delete_started", json!({ "pods": self.pods.len() }));
        for ((instance, job), ticket) in std::mem::take(&mut self.finish_tickets) {
            eng.cancel(ticket);
            if let Ok(q) = self.hierarchy.queue_mut(instance) {
                let _ = q.cancel(job, now);
            }
        }
        for instance in self.hierarchy.ids() {
            if let Ok(q) = self.hierarchy.queue_mut(instance) {
                let pending: Vec<JobId> = q.in_state(JobState::Pending).map(|j| j.job_id()).collect();
                for job in pending {
                    let _ = q.cancel(job, now);
                }
            }
        }
        self.try_teardowns(eng, true);
        self.continue_delete(eng);
    }

    /// Terminates every pod but index 0, then index 0 once it is alone.
    fn continue_delete(&mut self, eng: &mut Engine<SimEvent>) {
        let unplaced: Vec<u32> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending)
            .map(|p| p.index)
            .collect();
        for index in unplaced {
            self.pods.remove(&index);
        }
        let others: Vec<u32> = self
            .pods
            .values()
            .rev()
            .filter(|p| p.index != 0 && p.phase.is_active())
            .map(|p| p.index)
            .collect();
        for index in others {
            self.terminate_pod(eng, index);
        }
        let only_lead = self.pods.keys().all(|&i| i == 0);
        if only_lead {
            match self.pods.get(&0).map(|p| p.phase) {
                Some(phase) if phase.is_active() => self.terminate_pod(eng, 0),
                Some(_) => {}
                None => {
                    self.deleted = true;
                    self.times.delete_end = Some(eng.now());
                    self.nodes.close(eng.now());
                    eng.note("cluster_deleted", json!({}));
                }
            }
        }
    }

    fn apply(&mut self, eng: &mut Engine<SimEvent>, command: Command) -> Reply {
        let now = eng.now();
        let reply = match command {
            Command::Submit(request) => match self.hierarchy.root_mut().submit(request, now) {
                Ok(id) => {
                    eng.note("job_accepted", json!({ "job": id }));
                    Reply::Submitted(id)
                }
                Err(e) => Reply::Failed(e.into()),
            },
            Command::Cancel { job, user } => {
                let owner = self.queue().get(job).map(|j| j.spec.user.clone());
                match (owner, user) {
                    (None, _) => Reply::Failed(QueueError::UnknownJob(job).into()),
                    (Some(owner), Some(user)) if owner != user => Reply::Failed(CommandError::Forbidden(job)),
                    _ => match self.hierarchy.root_mut().cancel(job, now) {
                        Ok(record) => {
                            let record = record.clone();
                            if let Some(t) = self.finish_tickets.remove(&(ROOT_INSTANCE, job)) {
                                eng.cancel(t);
                            }
                            eng.note("job_canceled", json!({ "job": job }));
                            self.try_teardowns(eng, false);
                            Reply::Canceled(record)
                        }
                        Err(e) => Reply::Failed(e.into()),
                    },
                }
            }
            Command::Resize(size) => match self.resize(eng, size, "api") {
                Ok(generation) => Reply::Resized {
                    generation,
                    size: self.desired.spec.size,
                },
                Err(e) => Reply::Failed(e.into()),
            },
            Command::Pause => {
                let paused = self.hierarchy.root_mut().pause_queue(now);
                for job in &paused {
                    if let Some(t) = self.finish_tickets.remove(&(ROOT_INSTANCE, *job)) {
                        eng.cancel(t);
                    }
                }
                eng.note("queue_paused", json!({ "paused": paused }));
                Reply::Paused(paused)
            }
            Command::Resume => {
                let started = self.hierarchy.root_mut().resume_queue(now);
                for s in &started {
                    let t = eng.schedule_in(s.wall_time, SimEvent::JobFinished { instance: ROOT_INSTANCE, job: s.job_id });
                    self.finish_tickets.insert((ROOT_INSTANCE, s.job_id), t);
                }
                eng.note("queue_resumed", json!({ "resumed": started.len() }));
                Reply::Resumed(started.len())
            }
            Command::Save => match self.hierarchy.root().save_archive(now) {
                Ok(snapshot) => {
                    eng.note("archive_saved", json!({ "jobs": snapshot.jobs.len() }));
                    Reply::Saved(snapshot)
                }
                Err(e) => Reply::Failed(e.into()),
            },
            Command::Restore(snapshot) => match self.hierarchy.root_mut().restore_archive(&snapshot) {
                Ok(audit) => {
                    eng.note("archive_restored", serde_json::to_value(&audit).unwrap_or_default());
                    Reply::Restored(audit)
                }
                Err(e) => Reply::Failed(e.into()),
            },
            Command::Spawn { parent, ranks } => {
                let inventory = self.job_inventory();
                let config = self.cfg.queue;
                match self.hierarchy.spawn_subinstance(parent, ranks, &inventory, config) {
                    Ok(id) => Reply::Spawned(id),
                    Err(e) => Reply::Failed(e.into()),
                }
            }
        };
        self.schedule_jobs(eng);
        if self.cfg.check_invariants {
            self.check_invariants(eng.now());
        }
        reply
    }

    fn check_invariants(&mut self, now: SimTime) {
        if !self.deleting && !self.pods.is_empty() && !self.pods.contains_key(&0) {
            self.violations.push(format!("t={now}: pods exist without index 0"));
        }
        if self.cfg.anti_affinity {
            let mut per_node: BTreeMap<NodeId, u32> = BTreeMap::new();
            for p in self.pods.values() {
                if let Some(n) = p.node_id {
                    *per_node.entry(n).or_default() += 1;
                }
            }
            if let Some((n, c)) = per_node.into_iter().find(|&(_, c)| c > 1) {
                self.violations.push(format!("t={now}: {c} pods on {n}"));
            }
            let mut shapes: BTreeMap<NodeId, ResourceShape> =
                self.cfg.catalog.iter().map(|n| (n.node_id, n.shape)).collect();
            for r in self.burst.remotes() {
                shapes.extend(r.nodes.iter().map(|n| (n.node_id, n.shape)));
            }
            for id in self.hierarchy.ids() {
                if let Ok(q) = self.hierarchy.queue(id) {
                    if let Some((node, socket, cores)) = find_oversubscription(q.jobs(), &shapes) {
                        self.violations
                            .push(format!("t={now}: {node} socket {socket} holds {cores} cores"));
                    }
                }
            }
        }
        let reserved = self.burst.reserved_ranks();
        if let Some(r) = self.pods.keys().find(|r| reserved.contains(r)) {
            self.violations.push(format!("t={now}: rank {r} is both local and remote"));
        }
        let mut seen = BTreeSet::new();
        for r in self.burst.live_remotes() {
            for rank in r.ranks.clone() {
                if !seen.insert(rank) {
                    self.violations.push(format!("t={now}: rank {rank} in two remotes"));
                }
            }
        }
        for b in (0..self.overlay.max_size()).filter_map(|r| self.overlay.broker(r)) {
            if b.phase == BrokerPhase::Online && b.rank != 0 {
                if !b.parent_rank.is_some_and(|p| self.overlay.is_online(p)) {
                    self.violations.push(format!("t={now}: rank {} online without parent", b.rank));
                }
            }
        }
        if let Err(e) = self.hierarchy.check_invariants(&self.job_inventory()) {
            self.violations.push(format!("t={now}: {e}"));
        }
    }
}

/// Engine plus world, with the command queue external callers use.
#[derive(Debug)]
pub struct Simulation {
    engine: Engine<SimEvent>,
    world: World,
    commands: VecDeque<(u64, Command)>,
    next_command: u64,
}

impl Simulation {
    pub fn new(cfg: SimConfig, seed: u64) -> Result<Self, SimError> {
        Self::with_bursting(cfg, seed, BurstManager::default())
    }

    pub fn with_bursting(cfg: SimConfig, seed: u64, burst: BurstManager) -> Result<Self, SimError> {
        validate_spec(&cfg.spec).map_err(SimError::Spec)?;
        validate_catalog(&cfg.catalog)?;
        if let Some(scale) = &cfg.scale {
            scale.validate().map_err(SimError::Scale)?;
        }
        let mut engine = Engine::new(seed);
        // The controller generates the secret before any pod exists.
        let secret: [u8; 16] = rand::Rng::random(engine.rng());
        let config = ClusterConfig::from_spec(&cfg.spec, hex::encode(secret).into_bytes());
        let mut overlay = Overlay::new(&config, cfg.topology, cfg.retry);
        overlay.max_secret_attempts = cfg.max_secret_attempts;
        let mut root = JobQueue::new(cfg.queue);
        for (user, weight) in &cfg.share_weights {
            root.accounting.register(user, *weight);
        }
        let autoscaler = cfg
            .scale
            .clone()
            .map(|policy| Autoscaler::new(policy, cfg.spec.max_size));
        let world = World {
            desired: DesiredState::new(cfg.spec.clone()),
            config,
            pods: BTreeMap::new(),
            incarnations: BTreeMap::new(),
            overlay,
            hosts: BTreeMap::new(),
            hierarchy: Hierarchy::new(root),
            autoscaler,
            burst,
            finish_tickets: BTreeMap::new(),
            nodes: NodeLedger::default(),
            pull_cache: cfg.warm_pull_cache.clone(),
            costs: Vec::new(),
            times: Timeline::default(),
            auto_submit: None,
            lead_started: false,
            full: false,
            ever_full: false,
            deleting: false,
            deleted: false,
            outstanding: 0,
            entry_job: None,
            refused: BTreeSet::new(),
            violations: Vec::new(),
            cfg,
        };
        engine.note("reconcile_start", json!({ "size": world.desired.spec.size }));
        engine.schedule(0.0, SimEvent::Reconcile { generation: 1 })?;
        Ok(Self {
            engine,
            world,
            commands: VecDeque::new(),
            next_command: 0,
        })
    }

    fn script(&mut self, at: SimTime, event: SimEvent) -> Result<(), SimError> {
        self.engine.schedule(at, event)?;
        self.world.outstanding += 1;
        Ok(())
    }

    pub fn submit_at(&mut self, at: SimTime, request: JobRequest) -> Result<(), SimError> {
        self.script(at, SimEvent::JobSubmit { request })
    }

    pub fn resize_at(&mut self, at: SimTime, size: i64) -> Result<(), SimError> {
        self.script(at, SimEvent::Resize { size })
    }

    pub fn crash_at(&mut self, at: SimTime, index: u32) -> Result<(), SimError> {
        self.script(at, SimEvent::PodCrash { index })
    }

    pub fn delete_at(&mut self, at: SimTime) -> Result<(), SimError> {
        self.script(at, SimEvent::DeleteCluster)
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn set_logging(&mut self, enabled: bool) {
        self.engine.set_logging(enabled);
    }

    pub fn log(&self) -> &[LogRecord] {
        self.engine.log()
    }

    pub fn take_log(&mut self) -> Vec<LogRecord> {
        self.engine.take_log()
    }

    pub fn report(&self) -> RunReport {
        self.world.report(self.engine.now())
    }

    /// Runs until the cluster is deleted, events run out or `deadline`.
    pub fn run(&mut self, deadline: SimTime) -> StopReason {
        self.run_while(deadline, |w| w.deleted)
    }

    /// Runs until `stop` holds, events run out or `deadline`.
    pub fn run_while(&mut self, deadline: SimTime, stop: impl FnMut(&World) -> bool) -> StopReason {
        let (_, reason) = self
            .engine
            .run_until(&mut self.world, deadline, stop, |eng, w, ev| w.handle(eng, ev.payload));
        reason
    }

    /// Processes everything up to `now + dt` and leaves the clock there.
    pub fn advance(&mut self, dt: f64) {
        let target = self.engine.now() + dt.max(0.0);
        self.run_while(target, |_| false);
        self.engine.advance_to(target);
    }

    pub fn enqueue(&mut self, command: Command) -> u64 {
        let id = self.next_command;
        self.next_command += 1;
        self.commands.push_back((id, command));
        id
    }

    /// Applies queued commands in arrival order at the current instant.
    pub fn drain(&mut self) -> Vec<(u64, Reply)> {
        let mut out = Vec::new();
        while let Some((id, command)) = self.commands.pop_front() {
            out.push((id, self.world.apply(&mut self.engine, command)));
        }
        out
    }

    /// Enqueues one command and drains the queue, returning its reply.
    pub fn execute(&mut self, command: Command) -> Reply {
        let id = self.enqueue(command);
        self.drain()
            .into_iter()
            .find(|(i, _)| *i == id)
            .map(|(_, r)| r)
            .expect("own command drained")
    }

    /// The CLI resize path.
    pub fn resize(&mut self, size: i64) -> Result<u64, ResizeRejection> {
        self.world.resize(&mut self.engine, size, "cli")
    }

    pub fn teardown_remote(&mut self, id: u32) -> Result<Teardown, crate::burst::BurstError> {
        self.world.teardown_remote(&mut self.engine, id)
    }

    /// An opaque string from the engine's generator.
    pub fn random_token(&mut self) -> String {
        let bytes: [u8; 16] = rand::Rng::random(self.engine.rng());
        hex::encode(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ResourceShape {
        ResourceShape::new(2, 48, 1024).unwrap()
    }

    fn quiet(size: u32, max: u32) -> SimConfig {
        let mut spec = MiniClusterSpec::new("mc", size, max, shape());
        spec.entry_command = "lmp -in in.reaxc".into();
        let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(max + 1, shape()));
        cfg.latencies = Latencies {
            pod_create: LatencyModel::constant("c", 2.0),
            pod_terminate: LatencyModel::constant("t", 1.0),
            broker_start: LatencyModel::zero(),
            connect: LatencyModel::constant("n", 0.05),
            ..Latencies::default()
        };
        cfg.check_invariants = true;
        cfg
    }

    #[test]
    fn bring_up_run_and_delete() {
        let mut sim = Simulation::new(quiet(4, 8), 1).unwrap();
        assert_eq!(sim.run(1e6), StopReason::Predicate);
        let w = sim.world();
        assert!(w.violations().is_empty(), "{:?}", w.violations());
        let t = w.timeline();
        assert!((t.cluster_full_at.unwrap() - 2.05).abs() < 1e-9);
        let r = sim.report();
        assert_eq!(r.billed_nodes, 4);
        assert_eq!(r.workers, 4);
        assert!((r.wall_time.unwrap() - 1000.0 / 4.0).abs() < 1e-9);
        assert!((r.deletion_time.unwrap() - 2.0).abs() < 1e-9);
        let kinds: Vec<&str> = sim.log().iter().map(|r| r.kind.as_str()).collect();
        let last_terms: Vec<u64> = sim
            .log()
            .iter()
            .filter(|r| r.kind == "pod_terminate")
            .map(|r| r.payload["index"].as_u64().unwrap())
            .collect();
        assert_eq!(last_terms, vec![3, 2, 1, 0]);
        assert_eq!(kinds.last(), Some(&"cluster_deleted"));
    }

    #[test]
    fn external_launcher_bills_extra_node() {
        let mut cfg = quiet(5, 8);
        cfg.launch_mode = LaunchMode::ExternalLauncher;
        let mut sim = Simulation::new(cfg, 1).unwrap();
        sim.run(1e6);
        let r = sim.report();
        assert_eq!(r.workers, 4);
        assert_eq!(r.billed_nodes, 5);
        assert!((r.wall_time.unwrap() - 1000.0 / 4.0).abs() < 1e-9);
    }

    #[test]
    fn lead_delay_pushes_first_join() {
        let mut cfg = quiet(2, 2);
        cfg.lead_delay = 1.0;
        cfg.delete_when_done = false;
        let mut sim = Simulation::new(cfg, 1).unwrap();
        sim.run_while(1e6, |w| w.is_full());
        // Follower attempts at 2.0 + {0, 0.1, 0.3, 0.7, 1.5}; lead ready at 3.0.
        assert!((sim.now() - (3.5 + 0.05)).abs() < 1e-9);
    }

    #[test]
    fn resize_path_rejections() {
        let mut sim = Simulation::new(quiet(2, 4), 1).unwrap();
        assert!(matches!(sim.resize(0), Err(ResizeRejection::OutOfBounds(_))));
        assert!(matches!(sim.resize(5), Err(ResizeRejection::OutOfBounds(_))));
        assert_eq!(sim.resize(4), Ok(2));
        assert_eq!(
            sim.execute(Command::Resize(9)),
            Reply::Failed(CommandError::Resize(ResizeRejection::OutOfBounds(
                ResizeError::SizeOutOfBounds { requested: 9, max_size: 4 }
            )))
        );
    }

    #[test]
    fn crash_recreates_pod() {
        let mut cfg = quiet(3, 3);
        cfg.spec.interactive = true;
        cfg.delete_when_done = false;
        let mut sim = Simulation::new(cfg, 1).unwrap();
        sim.crash_at(10.0, 2).unwrap();
        sim.advance(20.0);
        let w = sim.world();
        assert!(w.is_full());
        assert!(sim.log().iter().any(|r| r.kind == "pod_lost"));
        assert!(w.violations().is_empty(), "{:?}", w.violations());
    }
}
