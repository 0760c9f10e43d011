//! Domain types shared by every part of the simulator.
//!
//! Nothing here has behavior beyond construction and validation. The
//! reconciler, overlay, queue and harness all speak in these types.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Port the lead broker listens on unless configured otherwise.
pub const DEFAULT_LEAD_PORT: u16 = 8050;

/// Simulated seconds since the start of a run.
pub type SimTime = f64;

/// Hardware hierarchy of a host: sockets, each with the same number of cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceShape {
    pub sockets: u32,
    pub cores_per_socket: u32,
    pub memory_mb: u64,
}

impl ResourceShape {
    pub fn new(sockets: u32, cores_per_socket: u32, memory_mb: u64) -> Result<Self, ModelError> {
        let shape = Self {
            sockets,
            cores_per_socket,
            memory_mb,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sockets == 0 || self.cores_per_socket == 0 || self.memory_mb == 0 {
            return Err(ModelError::InvalidShape(*self));
        }
        Ok(())
    }

    pub fn total_cores(&self) -> u32 {
        self.sockets * self.cores_per_socket
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// A physical host in the catalog pods are placed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub hostname: String,
    pub shape: ResourceShape,
}

/// Checks that hostnames and ids are unique within a catalog.
pub fn validate_catalog(catalog: &[NodeSpec]) -> Result<(), ModelError> {
    let mut hosts = std::collections::BTreeSet::new();
    let mut ids = std::collections::BTreeSet::new();
    for node in catalog {
        node.shape.validate()?;
        if !hosts.insert(node.hostname.as_str()) {
            return Err(ModelError::DuplicateHostname(node.hostname.clone()));
        }
        if !ids.insert(node.node_id) {
            return Err(ModelError::DuplicateNodeId(node.node_id));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    #[default]
    SingleUser,
    MultiUser,
}

/// A stored login: the password is kept only as a salted digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCredential {
    pub username: String,
    pub salt: String,
    pub password_hash: String,
}

impl UserCredential {
    pub fn new(username: impl Into<String>, password: &str) -> Self {
        let username = username.into();
        let salt = format!("salt-{username}");
        let password_hash = hash_password(&salt, password);
        Self {
            username,
            salt,
            password_hash,
        }
    }

    pub fn verify(&self, password: &str) -> bool {
        hash_password(&self.salt, password) == self.password_hash
    }
}

/// Hex SHA-256 of `salt:password`.
pub fn hash_password(salt: &str, password: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update(b":");
    hasher.update(password.as_bytes());
    hex::encode(hasher.finalize())
}

/// The declarative desired state of one MiniCluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniClusterSpec {
    pub name: String,
    pub size: u32,
    pub max_size: u32,
    pub pod_resources: ResourceShape,
    pub entry_command: String,
    pub interactive: bool,
    pub auth_mode: AuthMode,
    pub users: Vec<UserCredential>,
    pub lead_port: u16,
}

impl MiniClusterSpec {
    /// A single-user, non-interactive spec with the default lead port.
    pub fn new(name: impl Into<String>, size: u32, max_size: u32, pod_resources: ResourceShape) -> Self {
        Self {
            name: name.into(),
            size,
            max_size,
            pod_resources,
            entry_command: String::new(),
            interactive: false,
            auth_mode: AuthMode::SingleUser,
            users: Vec::new(),
            lead_port: DEFAULT_LEAD_PORT,
        }
    }

    pub fn hostname(&self, rank: u32) -> String {
        hostname_for(&self.name, rank)
    }
}

/// Predictable per-rank hostname, `<name>-<rank>`.
pub fn hostname_for(name: &str, rank: u32) -> String {
    format!("{name}-{rank}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("size {size} outside [1, {max_size}]")]
    SizeOutOfBounds { size: u32, max_size: u32 },
    #[error("cluster name is empty")]
    EmptyName,
    #[error("multi-user mode requires at least one user")]
    MissingUsers,
}

/// Names every violated invariant of `spec`, or returns `Ok`.
pub fn validate_spec(spec: &MiniClusterSpec) -> Result<(), Vec<ValidationError>> {
    let mut errors = Vec::new();
    if spec.size < 1 || spec.size > spec.max_size {
        errors.push(ValidationError::SizeOutOfBounds {
            size: spec.size,
            max_size: spec.max_size,
        });
    }
    if spec.name.trim().is_empty() {
        errors.push(ValidationError::EmptyName);
    }
    if spec.auth_mode == AuthMode::MultiUser && spec.users.is_empty() {
        errors.push(ValidationError::MissingUsers);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// The read-only configuration every broker mounts.
///
/// `ranked_hosts` always has `max_size` entries; ranks without a pod are
/// simply reported down by the lead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    ranked_hosts: Vec<String>,
    pub secret: Vec<u8>,
    pub lead_port: u16,
    pub entry_command: String,
}

impl ClusterConfig {
    pub fn from_spec(spec: &MiniClusterSpec, secret: Vec<u8>) -> Self {
        Self {
            ranked_hosts: (0..spec.max_size).map(|r| spec.hostname(r)).collect(),
            secret,
            lead_port: spec.lead_port,
            entry_command: spec.entry_command.clone(),
        }
    }

    pub fn ranked_hosts(&self) -> &[String] {
        &self.ranked_hosts
    }

    pub fn lead_hostname(&self) -> &str {
        &self.ranked_hosts[0]
    }

    pub fn max_size(&self) -> u32 {
        self.ranked_hosts.len() as u32
    }

    /// A copy carrying a different secret, as handed to a remote cluster.
    pub fn with_secret(&self, secret: Vec<u8>) -> Self {
        Self {
            secret,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A unit of work. `work_units` and `serial_fraction` drive the
/// strong-scaling wall time model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub user: String,
    pub nodes: u32,
    pub tasks_per_node: u32,
    pub work_units: f64,
    pub serial_fraction: f64,
    pub burstable: bool,
}

impl JobSpec {
    pub fn total_ranks(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.tasks_per_node)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.nodes < 1 {
            return Err(ModelError::InvalidJob("nodes must be at least 1"));
        }
        if self.tasks_per_node < 1 {
            return Err(ModelError::InvalidJob("tasks_per_node must be at least 1"));
        }
        if !(self.work_units.is_finite() && self.work_units > 0.0) {
            return Err(ModelError::InvalidJob("work_units must be positive"));
        }
        if !(0.0..=1.0).contains(&self.serial_fraction) {
            return Err(ModelError::InvalidJob("serial_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Paused,
    Completed,
    Canceled,
}

impl JobState {
    /// Whether the lifecycle allows `self -> next`.
    ///
    /// `Running -> Pending` and `Paused -> Pending` are the requeue taken
    /// when a job loses a rank.
    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Pending, Running)
                | (Pending, Canceled)
                | (Running, Completed)
                | (Running, Canceled)
                | (Running, Paused)
                | (Running, Pending)
                | (Paused, Running)
                | (Paused, Pending)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Canceled)
    }
}

/// Cores of one socket on one rank's host granted to a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub rank: u32,
    pub node_id: NodeId,
    pub socket: u32,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: JobSpec,
    pub state: JobState,
    pub submit_time: SimTime,
    pub start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
    pub allocation: Vec<Slot>,
    /// Fraction of the job's work still to do, in (0, 1].
    pub remaining: f64,
}

impl JobRecord {
    pub fn new(spec: JobSpec, submit_time: SimTime) -> Self {
        Self {
            spec,
            state: JobState::Pending,
            submit_time,
            start_time: None,
            end_time: None,
            allocation: Vec::new(),
            remaining: 1.0,
        }
    }

    pub fn job_id(&self) -> JobId {
        self.spec.job_id
    }

    pub fn remaining_work(&self) -> f64 {
        self.spec.work_units * self.remaining
    }

    /// Distinct ranks this job currently holds.
    pub fn ranks(&self) -> Vec<u32> {
        let ranks: std::collections::BTreeSet<u32> = self.allocation.iter().map(|s| s.rank).collect();
        ranks.into_iter().collect()
    }
}

/// A paused queue written out so it can be loaded into another cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSnapshot {
    pub saved_at: SimTime,
    pub jobs: Vec<JobRecord>,
    pub next_job_id: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid resource shape {0:?}: every field must be at least 1")]
    InvalidShape(ResourceShape),
    #[error("duplicate hostname {0} in catalog")]
    DuplicateHostname(String),
    #[error("duplicate node id {0} in catalog")]
    DuplicateNodeId(NodeId),
    #[error("invalid job spec: {0}")]
    InvalidJob(&'static str),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ResourceShape {
        ResourceShape::new(2, 48, 384_000).unwrap()
    }

    #[test]
    fn spec_examples() {
        assert!(validate_spec(&MiniClusterSpec::new("flux", 8, 64, shape())).is_ok());
        assert!(validate_spec(&MiniClusterSpec::new("flux", 1, 1, shape())).is_ok());
        let errs = validate_spec(&MiniClusterSpec::new("flux", 0, 4, shape())).unwrap_err();
        assert_eq!(errs, vec![ValidationError::SizeOutOfBounds { size: 0, max_size: 4 }]);
    }

    #[test]
    fn every_violation_is_named() {
        let mut spec = MiniClusterSpec::new("  ", 5, 4, shape());
        spec.auth_mode = AuthMode::MultiUser;
        let errs = validate_spec(&spec).unwrap_err();
        assert_eq!(errs.len(), 3);
        assert!(errs.contains(&ValidationError::EmptyName));
        assert!(errs.contains(&ValidationError::MissingUsers));
    }

    #[test]
    fn config_always_lists_max_size_hosts() {
        let spec = MiniClusterSpec::new("mc", 2, 6, shape());
        let cfg = ClusterConfig::from_spec(&spec, b"s".to_vec());
        assert_eq!(cfg.ranked_hosts().len(), 6);
        assert_eq!(cfg.lead_hostname(), "mc-0");
        assert_eq!(cfg.ranked_hosts()[5], "mc-5");
    }

    #[test]
    fn zero_shape_rejected() {
        assert!(ResourceShape::new(0, 4, 1).is_err());
        assert_eq!(shape().total_cores(), 96);
    }

    #[test]
    fn password_digest_roundtrip() {
        let cred = UserCredential::new("alice", "hunter2");
        assert!(cred.verify("hunter2"));
        assert!(!cred.verify("hunter3"));
    }

    #[test]
    fn job_lifecycle_edges() {
        use JobState::*;
        assert!(Pending.can_transition_to(Running));
        assert!(Paused.can_transition_to(Running));
        assert!(!Completed.can_transition_to(Running));
        assert!(!Pending.can_transition_to(Paused));
        assert!(!Paused.can_transition_to(Canceled));
    }
}
