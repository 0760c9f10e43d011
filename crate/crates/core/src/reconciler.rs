//! The operator control loop: plan pod creations and terminations that move
//! the observed indexed pod set toward the desired size.
//!
//! Everything here is pure planning. The simulation applies the returned
//! actions inside the engine loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MiniClusterSpec, NodeId, NodeSpec, ResourceShape, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodPhase {
    Pending,
    Creating,
    Running,
    Terminating,
    Gone,
}

impl PodPhase {
    /// Counts toward the cluster size.
    pub fn is_active(self) -> bool {
        matches!(self, PodPhase::Pending | PodPhase::Creating | PodPhase::Running)
    }

    pub fn is_in_flight(self) -> bool {
        matches!(self, PodPhase::Pending | PodPhase::Creating)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodInstance {
    pub index: u32,
    pub node_id: Option<NodeId>,
    pub phase: PodPhase,
    pub created_at: SimTime,
    pub ready_at: Option<SimTime>,
}

impl PodInstance {
    pub fn new(index: u32, phase: PodPhase) -> Self {
        Self {
            index,
            node_id: None,
            phase,
            created_at: 0.0,
            ready_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesiredState {
    pub spec: MiniClusterSpec,
    pub generation: u64,
}

impl DesiredState {
    pub fn new(spec: MiniClusterSpec) -> Self {
        Self { spec, generation: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Create(u32),
    Terminate(u32),
}

/// How many pods may be in flight at once. `None` creates everything at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchWidth(pub Option<u32>);

impl BatchWidth {
    pub const UNLIMITED: BatchWidth = BatchWidth(None);

    pub fn of(width: u32) -> Self {
        if width == 0 {
            Self::UNLIMITED
        } else {
            BatchWidth(Some(width))
        }
    }
}

/// Plans the actions that move `observed` toward `desired.spec.size`.
///
/// Missing indices below the size are created lowest first, at most
/// `width` in flight. Active indices at or above the size are terminated
/// highest first. An index whose previous pod is still terminating is left
/// alone until it is gone. Index 0 is never terminated because the size is
/// at least one.
pub fn reconcile(observed: &[PodInstance], desired: &DesiredState, width: BatchWidth) -> Vec<Action> {
    let size = desired.spec.size;
    let mut occupied = BTreeSet::new();
    let mut active = BTreeSet::new();
    let mut in_flight = 0u32;
    for pod in observed {
        match pod.phase {
            PodPhase::Gone => {}
            PodPhase::Terminating => {
                occupied.insert(pod.index);
            }
            phase => {
                occupied.insert(pod.index);
                active.insert(pod.index);
                if phase.is_in_flight() {
                    in_flight += 1;
                }
            }
        }
    }

    let budget = match width.0 {
        None => u32::MAX,
        Some(w) => w.saturating_sub(in_flight),
    };

    let mut actions: Vec<Action> = (0..size)
        .filter(|i| !occupied.contains(i))
        .take(budget as usize)
        .map(Action::Create)
        .collect();

    actions.extend(
        active
            .iter()
            .rev()
            .copied()
            .filter(|&i| i >= size && i != 0)
            .map(Action::Terminate),
    );
    actions
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResizeError {
    #[error("size {requested} outside [1, {max_size}]")]
    SizeOutOfBounds { requested: i64, max_size: u32 },
}

/// The single validation path for every resize, whoever asks.
pub fn request_resize(desired: &DesiredState, new_size: i64) -> Result<DesiredState, ResizeError> {
    let max_size = desired.spec.max_size;
    if new_size < 1 || new_size > i64::from(max_size) {
        return Err(ResizeError::SizeOutOfBounds {
            requested: new_size,
            max_size,
        });
    }
    let mut spec = desired.spec.clone();
    spec.size = new_size as u32;
    Ok(DesiredState {
        spec,
        generation: desired.generation + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("pod {0} is unschedulable: no free node")]
    Unschedulable(u32),
    #[error("pod {0} has no node assigned")]
    Unassigned(u32),
    #[error("node {0} is not in the catalog")]
    UnknownNode(NodeId),
}

/// Picks a node for `pod` from `catalog`, given the pods already placed.
///
/// With anti-affinity the first node hosting no pod of this cluster wins.
/// Without it the least loaded node wins, ties going to catalog order.
pub fn assign_node(
    pod: &PodInstance,
    catalog: &[NodeSpec],
    placed: &[PodInstance],
    anti_affinity: bool,
) -> Result<NodeId, PlacementError> {
    let load = |id: NodeId| {
        placed
            .iter()
            .filter(|p| p.index != pod.index && p.phase != PodPhase::Gone && p.node_id == Some(id))
            .count()
    };
    if anti_affinity {
        catalog
            .iter()
            .map(|n| n.node_id)
            .find(|&id| load(id) == 0)
            .ok_or(PlacementError::Unschedulable(pod.index))
    } else {
        catalog
            .iter()
            .map(|n| n.node_id)
            .min_by_key(|&id| load(id))
            .ok_or(PlacementError::Unschedulable(pod.index))
    }
}

/// What a broker inside `pod` sees when it inspects its hardware: the whole
/// host, whatever else shares it.
pub fn discover_resources(pod: &PodInstance, catalog: &[NodeSpec]) -> Result<ResourceShape, PlacementError> {
    let id = pod.node_id.ok_or(PlacementError::Unassigned(pod.index))?;
    catalog
        .iter()
        .find(|n| n.node_id == id)
        .map(|n| n.shape)
        .ok_or(PlacementError::UnknownNode(id))
}
