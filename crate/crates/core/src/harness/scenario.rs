//! Scenario files.
//!
//! A scenario is one TOML document; `docs/scenario.md` lists every key.
//! Unknown keys are rejected so typos surface as parse errors with a line
//! number.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoscaler::ScalePolicy;
use crate::burst::{BurstManager, BurstPlugin, LocalPlugin, MockPlugin};
use crate::cluster::{CostModel, EntryJob, Latencies, LaunchMode, SimConfig, SimError, Simulation};
use crate::engine::LatencyModel;
use crate::model::{
    validate_catalog, validate_spec, AuthMode, MiniClusterSpec, NodeId, NodeSpec, ResourceShape, UserCredential,
    DEFAULT_LEAD_PORT,
};
use crate::overlay::{RetryPolicy, Topology, DEFAULT_MAX_SECRET_ATTEMPTS};
use crate::queue::{JobRequest, LostRankPolicy, QueueConfig, SchedulePolicy, DEFAULT_HALF_LIFE};
use crate::reconciler::BatchWidth;

pub const DEFAULT_REPS: u32 = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    Io(String),
    Parse { line: Option<usize>, message: String },
    Invalid(Vec<String>),
    Runtime(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io(e) => write!(f, "{e}"),
            ScenarioError::Parse { line: Some(l), message } => write!(f, "line {l}: {message}"),
            ScenarioError::Parse { line: None, message } => write!(f, "{message}"),
            ScenarioError::Invalid(errors) => write!(f, "invalid scenario: {}", errors.join("; ")),
            ScenarioError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        ScenarioError::Invalid(vec![e.to_string()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    pub sockets: u32,
    pub cores_per_socket: u32,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
}

fn default_memory() -> u64 {
    1024
}

impl ShapeEntry {
    fn shape(&self) -> Result<ResourceShape, String> {
        ResourceShape::new(self.sockets, self.cores_per_socket, self.memory_mb).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default = "default_cluster_name")]
    pub name: String,
    pub size: u32,
    pub max_size: u32,
    pub pod_resources: ShapeEntry,
    #[serde(default)]
    pub entry_command: String,
    #[serde(default)]
    pub interactive: bool,
    #[serde(default)]
    pub auth_mode: AuthMode,
    #[serde(default = "default_port")]
    pub lead_port: u16,
    #[serde(default = "yes")]
    pub anti_affinity: bool,
    /// Zero means unlimited.
    #[serde(default)]
    pub batch_width: u32,
    #[serde(default)]
    pub lead_delay: f64,
    pub delete_when_done: Option<bool>,
    /// Secret local followers are configured with instead of the real one.
    pub follower_secret: Option<String>,
}

fn default_cluster_name() -> String {
    "flux-sample".into()
}

fn default_port() -> u16 {
    DEFAULT_LEAD_PORT
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub name: String,
    pub password: String,
    #[serde(default = "one")]
    pub share_weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogGroup {
    pub count: u32,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    pub sockets: u32,
    pub cores_per_socket: u32,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
}

fn default_prefix() -> String {
    "node".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrySection {
    pub base_interval: f64,
    pub multiplier: f64,
    pub cap: f64,
    pub max_secret_attempts: u32,
}

impl Default for RetrySection {
    fn default() -> Self {
        let p = RetryPolicy::default();
        Self {
            base_interval: p.base_interval,
            multiplier: p.multiplier,
            cap: p.cap,
            max_secret_attempts: DEFAULT_MAX_SECRET_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    /// Absent means flat.
    pub fanout: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueSection {
    pub policy: SchedulePolicy,
    pub alpha: f64,
    pub half_life: f64,
    pub lost_rank: LostRankPolicy,
}

impl Default for QueueSection {
    fn default() -> Self {
        Self {
            policy: SchedulePolicy::FirstFit,
            alpha: 0.0,
            half_life: DEFAULT_HALF_LIFE,
            lost_rank: LostRankPolicy::Requeue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobEntry {
    pub at: f64,
    pub user: Option<String>,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PluginEntry {
    Mock {
        name: String,
        capacity: u32,
        sockets: u32,
        cores_per_socket: u32,
        #[serde(default = "default_memory")]
        memory_mb: u64,
        #[serde(default = "default_plugin_latency")]
        latency: LatencyModel,
        #[serde(default)]
        corrupt_secret: bool,
    },
    Local {
        name: String,
        count: u32,
        #[serde(default = "default_reserve_prefix")]
        prefix: String,
        sockets: u32,
        cores_per_socket: u32,
        #[serde(default = "default_memory")]
        memory_mb: u64,
        #[serde(default = "default_plugin_latency")]
        latency: LatencyModel,
    },
}

fn default_plugin_latency() -> LatencyModel {
    LatencyModel::constant("provision", 30.0)
}

fn default_reserve_prefix() -> String {
    "reserve".into()
}

impl PluginEntry {
    pub fn name(&self) -> &str {
        match self {
            PluginEntry::Mock { name, .. } | PluginEntry::Local { name, .. } => name,
        }
    }

    fn build(&self, index: usize) -> Result<Box<dyn BurstPlugin>, String> {
        match self {
            PluginEntry::Mock {
                name,
                capacity,
                sockets,
                cores_per_socket,
                memory_mb,
                latency,
                corrupt_secret,
            } => {
                let shape = ResourceShape::new(*sockets, *cores_per_socket, *memory_mb).map_err(|e| e.to_string())?;
                let mut p = MockPlugin::new(name.clone(), *capacity, shape, latency.clone());
                p.corrupt_secret = *corrupt_secret;
                Ok(Box::new(p))
            }
            PluginEntry::Local {
                name,
                count,
                prefix,
                sockets,
                cores_per_socket,
                memory_mb,
                latency,
            } => {
                let shape = ResourceShape::new(*sockets, *cores_per_socket, *memory_mb).map_err(|e| e.to_string())?;
                let base = 200_000 + 10_000 * index as u32;
                let reserve = (0..*count)
                    .map(|i| NodeSpec {
                        node_id: NodeId(base + i),
                        hostname: format!("{prefix}-{i}"),
                        shape,
                    })
                    .collect();
                Ok(Box::new(LocalPlugin::new(name.clone(), reserve, latency.clone())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeEntry {
    pub at: f64,
    pub size: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashEntry {
    pub at: f64,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Worker counts to sweep.
    pub sizes: Vec<u32>,
    /// Overrides `workload.tasks_per_node`.
    pub tasks_per_node: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostsSection {
    pub image_pull: bool,
    pub pull_cache: bool,
    pub on_demand_nodes: Option<bool>,
    /// Warm the pull cache with an unrecorded run before each size.
    pub throwaway_run: bool,
}

impl Default for CostsSection {
    fn default() -> Self {
        Self {
            image_pull: false,
            pull_cache: true,
            on_demand_nodes: None,
            throwaway_run: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default)]
    pub mode: LaunchMode,
    /// Simulated-seconds cap per run.
    #[serde(default = "default_deadline")]
    pub deadline: f64,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub users: Vec<UserEntry>,
    #[serde(default)]
    pub catalog: Vec<CatalogGroup>,
    #[serde(default)]
    pub retry: RetrySection,
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub latency: Latencies,
    #[serde(default)]
    pub workload: EntryJob,
    #[serde(default)]
    pub queue: QueueSection,
    #[serde(default)]
    pub jobs: Vec<JobEntry>,
    pub autoscale: Option<ScalePolicy>,
    #[serde(default)]
    pub plugins: Vec<PluginEntry>,
    #[serde(default)]
    pub resizes: Vec<ResizeEntry>,
    #[serde(default)]
    pub crashes: Vec<CrashEntry>,
    pub delete_at: Option<f64>,
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub costs: CostsSection,
}

fn default_reps() -> u32 {
    DEFAULT_REPS
}

fn default_deadline() -> f64 {
    1.0e7
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

impl Scenario {
    /// Worker counts this scenario runs.
    pub fn sizes(&self) -> Vec<u32> {
        match &self.experiment {
            Some(e) if !e.sizes.is_empty() => e.sizes.clone(),
            _ => vec![self.cluster.size],
        }
    }

    pub fn catalog_nodes(&self) -> Vec<NodeSpec> {
        let mut out = Vec::new();
        for group in &self.catalog {
            let Ok(shape) = ResourceShape::new(group.sockets, group.cores_per_socket, group.memory_mb) else {
                continue;
            };
            for i in 0..group.count {
                out.push(NodeSpec {
                    node_id: NodeId(out.len() as u32),
                    hostname: format!("{}-{i}", group.prefix),
                    shape,
                });
            }
        }
        out
    }

    fn pods_for(&self, workers: u32, mode: LaunchMode) -> u32 {
        match mode {
            LaunchMode::EmbeddedLead => workers,
            LaunchMode::ExternalLauncher => workers + 1,
        }
    }

    /// Every problem found, or ok. A missing seed is allowed only when an
    /// override will be supplied.
    pub fn validate(&self, seed_override: bool) -> Result<(), ScenarioError> {
        let mut errors = Vec::new();
        if self.seed.is_none() && !seed_override {
            errors.push("seed is required".to_string());
        }
        if self.reps == 0 {
            errors.push("reps must be at least 1".into());
        }
        if !(self.deadline > 0.0) {
            errors.push("deadline must be positive".into());
        }
        let mode_list = [self.mode];
        for &workers in &self.sizes() {
            match self.spec(workers, self.mode) {
                Ok(spec) => {
                    if let Err(list) = validate_spec(&spec) {
                        errors.extend(list.into_iter().map(|e| format!("cluster: {e}")));
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        if let Err(e) = self.cluster.pod_resources.shape() {
            errors.push(format!("cluster.pod_resources: {e}"));
        }
        let catalog = self.catalog_nodes();
        if self.catalog.is_empty() {
            errors.push("catalog is empty".into());
        }
        for (i, g) in self.catalog.iter().enumerate() {
            if ResourceShape::new(g.sockets, g.cores_per_socket, g.memory_mb).is_err() {
                errors.push(format!("catalog[{i}]: invalid shape"));
            }
        }
        if let Err(e) = validate_catalog(&catalog) {
            errors.push(format!("catalog: {e}"));
        }
        if self.cluster.anti_affinity {
            let mut needed = self
                .sizes()
                .iter()
                .flat_map(|&w| mode_list.iter().map(move |&m| (w, m)))
                .map(|(w, m)| self.pods_for(w, m))
                .max()
                .unwrap_or(0);
            if self.autoscale.is_some() || !self.resizes.is_empty() {
                needed = needed.max(self.cluster.max_size);
            }
            if (catalog.len() as u32) < needed {
                errors.push(format!(
                    "catalog has {} nodes but anti-affinity needs {needed}",
                    catalog.len()
                ));
            }
        }
        let users: BTreeSet<&str> = self.users.iter().map(|u| u.name.as_str()).collect();
        if users.len() != self.users.len() {
            errors.push("duplicate user names".into());
        }
        if !users.is_empty() {
            for (i, job) in self.jobs.iter().enumerate() {
                if let Some(u) = &job.user {
                    if !users.contains(u.as_str()) {
                        errors.push(format!("jobs[{i}]: unknown user {u}"));
                    }
                }
            }
            if let Some(u) = &self.workload.user {
                if !users.contains(u.as_str()) {
                    errors.push(format!("workload: unknown user {u}"));
                }
            }
        }
        for (i, job) in self.jobs.iter().enumerate() {
            if job.at < 0.0 {
                errors.push(format!("jobs[{i}]: negative submit time"));
            }
            if job.nodes == 0 || job.tasks_per_node == 0 {
                errors.push(format!("jobs[{i}]: nodes and tasks_per_node must be at least 1"));
            }
            if !(0.0..=1.0).contains(&job.serial_fraction) || !(job.work_units > 0.0) {
                errors.push(format!("jobs[{i}]: invalid work model"));
            }
        }
        if self.workload.tasks_per_node == 0 || !(self.workload.work_units > 0.0) {
            errors.push("workload: tasks_per_node and work_units must be positive".into());
        }
        if let Some(p) = &self.autoscale {
            if let Err(e) = p.validate() {
                errors.push(format!("autoscale: {e}"));
            }
        }
        let mut plugin_names = BTreeSet::new();
        for (i, p) in self.plugins.iter().enumerate() {
            if !plugin_names.insert(p.name()) {
                errors.push(format!("plugins[{i}]: duplicate name {}", p.name()));
            }
            if let Err(e) = p.build(i) {
                errors.push(format!("plugins[{i}]: {e}"));
            }
        }
        for (i, c) in self.crashes.iter().enumerate() {
            if c.index == 0 {
                errors.push(format!("crashes[{i}]: the lead pod cannot be crashed"));
            }
        }
        if self.retry.multiplier <= 1.0 || self.retry.base_interval <= 0.0 || self.retry.cap <= 0.0 {
            errors.push("retry: need base_interval > 0, multiplier > 1, cap > 0".into());
        }
        if self.topology.fanout == Some(0) {
            errors.push("topology: fanout must be at least 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    fn spec(&self, workers: u32, mode: LaunchMode) -> Result<MiniClusterSpec, String> {
        let shape = self
            .cluster
            .pod_resources
            .shape()
            .map_err(|e| format!("cluster.pod_resources: {e}"))?;
        let size = self.pods_for(workers, mode);
        let mut spec = MiniClusterSpec::new(self.cluster.name.clone(), size, self.cluster.max_size.max(size), shape);
        spec.entry_command = self.cluster.entry_command.clone();
        spec.interactive = self.cluster.interactive;
        spec.auth_mode = self.cluster.auth_mode;
        spec.lead_port = self.cluster.lead_port;
        spec.users = self
            .users
            .iter()
            .map(|u| UserCredential::new(u.name.clone(), &u.password))
            .collect();
        if size == 0 {
            spec.size = 0;
        }
        Ok(spec)
    }

    /// Engine configuration for one run with `workers` worker ranks.
    pub fn sim_config(&self, workers: u32, mode: LaunchMode) -> Result<SimConfig, ScenarioError> {
        let spec = self.spec(workers, mode).map_err(|e| ScenarioError::Invalid(vec![e]))?;
        let mut cfg = SimConfig::new(spec, self.catalog_nodes());
        cfg.anti_affinity = self.cluster.anti_affinity;
        cfg.batch_width = BatchWidth::of(self.cluster.batch_width);
        cfg.retry = RetryPolicy {
            base_interval: self.retry.base_interval,
            multiplier: self.retry.multiplier,
            cap: self.retry.cap,
        };
        cfg.max_secret_attempts = self.retry.max_secret_attempts;
        cfg.topology = match self.topology.fanout {
            Some(k) => Topology::Tree(k),
            None => Topology::Flat,
        };
        cfg.follower_secret = self.cluster.follower_secret.clone().map(String::into_bytes);
        cfg.latencies = self.latency.clone();
        cfg.lead_delay = self.cluster.lead_delay;
        cfg.queue = QueueConfig {
            policy: self.queue.policy,
            alpha: self.queue.alpha,
            half_life: self.queue.half_life,
            lost_rank: self.queue.lost_rank,
        };
        cfg.share_weights = self.users.iter().map(|u| (u.name.clone(), u.share_weight)).collect();
        cfg.scale = self.autoscale.clone();
        cfg.costs = CostModel {
            image_pull: self.costs.image_pull,
            pull_cache: self.costs.pull_cache,
            on_demand_nodes: self.costs.on_demand_nodes,
        };
        cfg.launch_mode = mode;
        cfg.entry_job = self.workload.clone();
        if let Some(t) = self.experiment.as_ref().and_then(|e| e.tasks_per_node) {
            cfg.entry_job.tasks_per_node = t;
        }
        cfg.delete_when_done = self.cluster.delete_when_done.unwrap_or(self.delete_at.is_none());
        Ok(cfg)
    }

    pub fn burst_manager(&self) -> Result<BurstManager, ScenarioError> {
        let plugins = self
            .plugins
            .iter()
            .enumerate()
            .map(|(i, p)| p.build(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ScenarioError::Invalid(vec![e]))?;
        Ok(BurstManager::new(plugins))
    }

    /// A ready-to-run simulation with the scripted events scheduled.
    pub fn build(&self, cfg: SimConfig, seed: u64) -> Result<Simulation, ScenarioError> {
        let mut sim = Simulation::with_bursting(cfg, seed, self.burst_manager()?)?;
        let fallback_user = self.users.first().map_or("flux", |u| u.name.as_str());
        for job in &self.jobs {
            let user = job.user.clone().unwrap_or_else(|| fallback_user.to_string());
            let request = JobRequest::new(user, job.nodes, job.tasks_per_node)
                .with_work(job.work_units, job.serial_fraction)
                .burstable(job.burstable);
            sim.submit_at(job.at, request)?;
        }
        for r in &self.resizes {
            sim.resize_at(r.at, r.size)?;
        }
        for c in &self.crashes {
            sim.crash_at(c.at, c.index)?;
        }
        if let Some(at) = self.delete_at {
            sim.delete_at(at)?;
        }
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "tiny"
seed = 7

[cluster]
size = 2
max_size = 4
pod_resources = { sockets = 1, cores_per_socket = 4 }

[[catalog]]
count = 4
sockets = 1
cores_per_socket = 4
"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.reps, 20);
        assert_eq!(s.mode, LaunchMode::EmbeddedLead);
        assert_eq!(s.retry.base_interval, 0.1);
        assert!(s.validate(false).is_ok());
        assert_eq!(s.catalog_nodes()[3].hostname, "node-3");
    }

    #[test]
    fn parse_error_names_line() {
        let text = MINIMAL.replace("count = 4", "count = \"four\"");
        match parse_scenario(&text) {
            Err(ScenarioError::Parse { line: Some(l), .. }) => assert_eq!(l, 11),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("seed = 7", "seed = 7\nsede = 8");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Parse { line: Some(4), .. })));
    }

    #[test]
    fn validation_collects_everything() {
        let mut s = parse_scenario(MINIMAL).unwrap();
        s.seed = None;
        s.cluster.size = 0;
        s.crashes.push(CrashEntry { at: 1.0, index: 0 });
        let Err(ScenarioError::Invalid(errors)) = s.validate(false) else {
            panic!("expected errors");
        };
        assert_eq!(errors.len(), 3, "{errors:?}");
        assert!(s.validate(true).is_err());
    }

    #[test]
    fn external_mode_adds_launcher() {
        let s = parse_scenario(MINIMAL).unwrap();
        let cfg = s.sim_config(4, LaunchMode::ExternalLauncher).unwrap();
        assert_eq!((cfg.spec.size, cfg.spec.max_size), (5, 5));
    }
}
