//! Plugin-driven bursting.
//!
//! Pending burstable jobs the local cluster can never hold are offered to
//! plugins. The chosen plugin provisions a remote cluster whose brokers take
//! phantom ranks in `[size, max_size)` and join the local lead through the
//! same overlay bootstrap as local followers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::LatencyModel;
use crate::model::{ClusterConfig, JobId, JobSpec, JobState, NodeId, NodeSpec, ResourceShape};
use crate::queue::JobQueue;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BurstError {
    #[error("no plugin can satisfy job {0}")]
    NoPluginSatisfiable(JobId),
    #[error("burst of {needed} ranks does not fit in the free phantom ranks below max size {max_size}")]
    InsufficientPhantomRanks { needed: u32, max_size: u32 },
    #[error("remote cluster {0} still hosts running work")]
    BusyRanks(u32),
    #[error("plugin {plugin} refused job {job}")]
    NotSatisfiable { plugin: String, job: JobId },
    #[error("unknown remote cluster {0}")]
    UnknownRemote(u32),
    #[error("unknown plugin index {0}")]
    UnknownPlugin(usize),
}

/// Where remote brokers find the lead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeadAdvertisement {
    pub address: String,
    pub port: u16,
}

impl LeadAdvertisement {
    pub fn for_cluster(config: &ClusterConfig) -> Self {
        Self {
            address: format!("{}.nodeport", config.lead_hostname()),
            port: config.lead_port,
        }
    }
}

impl fmt::Display for LeadAdvertisement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.address, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteState {
    Provisioning,
    Joined,
    TornDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteCluster {
    pub id: u32,
    pub plugin: String,
    pub hostnames: Vec<String>,
    pub ranks: Range<u32>,
    pub nodes: Vec<NodeSpec>,
    /// Secret the remote brokers were configured with.
    #[serde(skip)]
    pub secret: Vec<u8>,
    pub state: RemoteState,
    pub job: JobId,
    pub lead: String,
}

/// `burst-<k>/<name>-<rank>`.
pub fn burst_hostname(k: u32, cluster: &str, rank: u32) -> String {
    format!("burst-{k}/{cluster}-{rank}")
}

/// Everything a plugin is told when asked to provision.
#[derive(Debug, Clone)]
pub struct ProvisionRequest<'a> {
    pub burst_id: u32,
    pub cluster_name: &'a str,
    pub ranks: Range<u32>,
    pub config: &'a ClusterConfig,
    pub lead: &'a LeadAdvertisement,
}

pub trait BurstPlugin: Send {
    fn name(&self) -> &str;

    /// The plugin's own terms for accepting `nodes` remote nodes for `job`.
    fn is_satisfiable(&self, job: &JobSpec, nodes: u32) -> bool;

    fn provision(&mut self, request: &ProvisionRequest<'_>) -> RemoteCluster;

    fn teardown(&mut self, remote: &RemoteCluster);

    fn provision_latency(&self) -> LatencyModel;
}

fn remote_from(
    plugin: &str,
    request: &ProvisionRequest<'_>,
    nodes: Vec<NodeSpec>,
    secret: Vec<u8>,
    job: JobId,
) -> RemoteCluster {
    RemoteCluster {
        id: request.burst_id,
        plugin: plugin.to_string(),
        hostnames: request
            .ranks
            .clone()
            .map(|r| burst_hostname(request.burst_id, request.cluster_name, r))
            .collect(),
        ranks: request.ranks.clone(),
        nodes,
        secret,
        state: RemoteState::Provisioning,
        job,
        lead: request.lead.to_string(),
    }
}

/// A cloud stand-in with a fixed node capacity.
#[derive(Debug, Clone)]
pub struct MockPlugin {
    pub name: String,
    pub capacity: u32,
    pub shape: ResourceShape,
    pub latency: LatencyModel,
    /// Hand remote brokers a wrong secret, for admission tests.
    pub corrupt_secret: bool,
    in_use: BTreeMap<u32, u32>,
    node_base: u32,
    teardowns: usize,
}

impl MockPlugin {
    pub fn new(name: impl Into<String>, capacity: u32, shape: ResourceShape, latency: LatencyModel) -> Self {
        Self {
            name: name.into(),
            capacity,
            shape,
            latency,
            corrupt_secret: false,
            in_use: BTreeMap::new(),
            node_base: 100_000,
            teardowns: 0,
        }
    }

    pub fn available(&self) -> u32 {
        self.capacity - self.in_use.values().sum::<u32>()
    }

    pub fn teardown_count(&self) -> usize {
        self.teardowns
    }
}

impl BurstPlugin for MockPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_satisfiable(&self, job: &JobSpec, nodes: u32) -> bool {
        nodes <= self.available() && job.tasks_per_node <= self.shape.total_cores()
    }

    fn provision(&mut self, request: &ProvisionRequest<'_>) -> RemoteCluster {
        let count = request.ranks.len() as u32;
        self.in_use.insert(request.burst_id, count);
        let nodes = request
            .ranks
            .clone()
            .map(|r| NodeSpec {
                node_id: NodeId(self.node_base + request.burst_id * 1000 + r),
                hostname: burst_hostname(request.burst_id, request.cluster_name, r),
                shape: self.shape,
            })
            .collect();
        let secret = if self.corrupt_secret {
            b"not-the-cluster-secret".to_vec()
        } else {
            request.config.secret.clone()
        };
        remote_from(&self.name, request, nodes, secret, JobId(0))
    }

    fn teardown(&mut self, remote: &RemoteCluster) {
        self.in_use.remove(&remote.id);
        self.teardowns += 1;
    }

    fn provision_latency(&self) -> LatencyModel {
        self.latency.clone()
    }
}

/// Bursts onto a reserve pool of on-premises nodes.
#[derive(Debug, Clone)]
pub struct LocalPlugin {
    pub name: String,
    pub reserve: Vec<NodeSpec>,
    pub latency: LatencyModel,
    taken: BTreeMap<u32, Vec<NodeId>>,
}

impl LocalPlugin {
    pub fn new(name: impl Into<String>, reserve: Vec<NodeSpec>, latency: LatencyModel) -> Self {
        Self {
            name: name.into(),
            reserve,
            latency,
            taken: BTreeMap::new(),
        }
    }

    fn free_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        let taken: BTreeSet<NodeId> = self.taken.values().flatten().copied().collect();
        self.reserve.iter().filter(move |n| !taken.contains(&n.node_id))
    }
}

impl BurstPlugin for LocalPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_satisfiable(&self, job: &JobSpec, nodes: u32) -> bool {
        self.free_nodes()
            .filter(|n| n.shape.total_cores() >= job.tasks_per_node)
            .count()
            >= nodes as usize
    }

    fn provision(&mut self, request: &ProvisionRequest<'_>) -> RemoteCluster {
        let count = request.ranks.len();
        let picked: Vec<NodeSpec> = self.free_nodes().take(count).cloned().collect();
        self.taken
            .insert(request.burst_id, picked.iter().map(|n| n.node_id).collect());
        let nodes = picked
            .into_iter()
            .zip(request.ranks.clone())
            .map(|(n, r)| NodeSpec {
                hostname: burst_hostname(request.burst_id, request.cluster_name, r),
                ..n
            })
            .collect();
        remote_from(&self.name, request, nodes, request.config.secret.clone(), JobId(0))
    }

    fn teardown(&mut self, remote: &RemoteCluster) {
        self.taken.remove(&remote.id);
    }

    fn provision_latency(&self) -> LatencyModel {
        self.latency.clone()
    }
}

/// A pending job handed to a plugin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub job: JobId,
    pub plugin: usize,
    /// Remote nodes to provision.
    pub nodes: u32,
}

/// Picks a plugin index for a job needing `nodes` remote nodes.
pub type Selector = Box<dyn Fn(&JobSpec, u32, &[Box<dyn BurstPlugin>]) -> Option<usize> + Send>;

/// First registered plugin that answers satisfiable.
pub fn first_satisfiable(job: &JobSpec, nodes: u32, plugins: &[Box<dyn BurstPlugin>]) -> Option<usize> {
    plugins.iter().position(|p| p.is_satisfiable(job, nodes))
}

/// Outcome of a teardown request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Teardown {
    Released(Range<u32>),
    AlreadyTornDown,
}

pub struct BurstManager {
    plugins: Vec<Box<dyn BurstPlugin>>,
    selector: Selector,
    remotes: BTreeMap<u32, RemoteCluster>,
    assigned: BTreeSet<JobId>,
    next_id: u32,
}

impl Default for BurstManager {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl fmt::Debug for BurstManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BurstManager")
            .field("plugins", &self.plugins.iter().map(|p| p.name().to_string()).collect::<Vec<_>>())
            .field("remotes", &self.remotes)
            .finish()
    }
}

impl BurstManager {
    pub fn new(plugins: Vec<Box<dyn BurstPlugin>>) -> Self {
        Self {
            plugins,
            selector: Box::new(first_satisfiable),
            remotes: BTreeMap::new(),
            assigned: BTreeSet::new(),
            next_id: 0,
        }
    }

    pub fn with_selector(mut self, selector: Selector) -> Self {
        self.selector = selector;
        self
    }

    pub fn has_plugins(&self) -> bool {
        !self.plugins.is_empty()
    }

    pub fn plugin(&self, index: usize) -> Option<&dyn BurstPlugin> {
        self.plugins.get(index).map(|p| p.as_ref())
    }

    pub fn remotes(&self) -> impl Iterator<Item = &RemoteCluster> {
        self.remotes.values()
    }

    pub fn remote(&self, id: u32) -> Option<&RemoteCluster> {
        self.remotes.get(&id)
    }

    pub fn live_remotes(&self) -> impl Iterator<Item = &RemoteCluster> {
        self.remotes.values().filter(|r| r.state != RemoteState::TornDown)
    }

    /// Ranks held by remote clusters that are not torn down.
    pub fn reserved_ranks(&self) -> BTreeSet<u32> {
        self.live_remotes().flat_map(|r| r.ranks.clone()).collect()
    }

    pub fn is_assigned(&self, job: JobId) -> bool {
        self.assigned.contains(&job)
    }

    /// Offers each pending burstable job the local cluster can never hold
    /// to the selector. `local_capable(tasks_per_node)` counts local ranks
    /// able to host that many tasks. Returns assignments and the jobs no
    /// plugin would take.
    pub fn burst_check(
        &self,
        queue: &JobQueue,
        local_capable: impl Fn(u32) -> u32,
    ) -> (Vec<Assignment>, Vec<JobId>) {
        let mut assignments = Vec::new();
        let mut refused = Vec::new();
        for job in queue.in_state(JobState::Pending) {
            let spec = &job.spec;
            if !spec.burstable || self.assigned.contains(&spec.job_id) {
                continue;
            }
            let local = local_capable(spec.tasks_per_node);
            if local >= spec.nodes {
                continue;
            }
            let needed = spec.nodes - local;
            match (self.selector)(spec, needed, &self.plugins) {
                Some(plugin) => assignments.push(Assignment {
                    job: spec.job_id,
                    plugin,
                    nodes: needed,
                }),
                None => refused.push(spec.job_id),
            }
        }
        (assignments, refused)
    }

    /// Lowest contiguous run of `needed` ranks in `[size, max_size)` that
    /// avoids `local_ranks` and every live remote.
    pub fn allocate_ranks(
        &self,
        needed: u32,
        size: u32,
        max_size: u32,
        local_ranks: &BTreeSet<u32>,
    ) -> Result<Range<u32>, BurstError> {
        let reserved = self.reserved_ranks();
        let taken = |r: u32| local_ranks.contains(&r) || reserved.contains(&r);
        let mut start = size;
        while start + needed <= max_size {
            match (start..start + needed).find(|&r| taken(r)) {
                None => return Ok(start..start + needed),
                Some(blocked) => start = blocked + 1,
            }
        }
        Err(BurstError::InsufficientPhantomRanks { needed, max_size })
    }

    /// Provisions the assignment on its plugin. The caller schedules the
    /// join after the returned latency model's sample.
    pub fn execute_burst(
        &mut self,
        assignment: &Assignment,
        job: &JobSpec,
        config: &ClusterConfig,
        cluster_name: &str,
        size: u32,
        local_ranks: &BTreeSet<u32>,
    ) -> Result<(u32, LatencyModel), BurstError> {
        let plugin = self
            .plugins
            .get(assignment.plugin)
            .ok_or(BurstError::UnknownPlugin(assignment.plugin))?;
        if !plugin.is_satisfiable(job, assignment.nodes) {
            return Err(BurstError::NotSatisfiable {
                plugin: plugin.name().to_string(),
                job: job.job_id,
            });
        }
        let ranks = self.allocate_ranks(assignment.nodes, size, config.max_size(), local_ranks)?;
        let id = self.next_id;
        let lead = LeadAdvertisement::for_cluster(config);
        let request = ProvisionRequest {
            burst_id: id,
            cluster_name,
            ranks,
            config,
            lead: &lead,
        };
        let plugin = &mut self.plugins[assignment.plugin];
        let mut remote = plugin.provision(&request);
        remote.job = job.job_id;
        let latency = plugin.provision_latency();
        self.next_id += 1;
        self.assigned.insert(job.job_id);
        self.remotes.insert(id, remote);
        Ok((id, latency))
    }

    pub fn mark_joined(&mut self, id: u32) -> Option<&RemoteCluster> {
        let remote = self.remotes.get_mut(&id)?;
        if remote.state == RemoteState::Provisioning {
            remote.state = RemoteState::Joined;
        }
        Some(remote)
    }

    /// Tears a remote down unless a running allocation still touches it.
    /// A second call on the same remote is a no-op.
    pub fn teardown(&mut self, id: u32, busy_ranks: &BTreeSet<u32>) -> Result<Teardown, BurstError> {
        let remote = self.remotes.get(&id).ok_or(BurstError::UnknownRemote(id))?;
        if remote.state == RemoteState::TornDown {
            return Ok(Teardown::AlreadyTornDown);
        }
        if remote.ranks.clone().any(|r| busy_ranks.contains(&r)) {
            return Err(BurstError::BusyRanks(id));
        }
        let plugin_index = self
            .plugins
            .iter()
            .position(|p| p.name() == remote.plugin)
            .ok_or(BurstError::UnknownRemote(id))?;
        let remote = self.remotes.get_mut(&id).expect("checked");
        self.plugins[plugin_index].teardown(remote);
        remote.state = RemoteState::TornDown;
        Ok(Teardown::Released(remote.ranks.clone()))
    }
}
