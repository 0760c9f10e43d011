//! Nested scheduler instances. A child owns a subset of its parent's ranks
//! exclusively and runs its own queue on them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Inventory, JobQueue, QueueConfig, QueueError, Started};
use crate::model::SimTime;

pub type InstanceId = u32;

pub const ROOT_INSTANCE: InstanceId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubInstance {
    pub instance_id: InstanceId,
    pub parent: Option<InstanceId>,
    /// `None` for the root, which owns whatever ranks are online.
    pub granted: Option<BTreeSet<u32>>,
}

#[derive(Debug, Clone)]
struct Instance {
    info: SubInstance,
    queue: JobQueue,
    children: BTreeSet<InstanceId>,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    instances: BTreeMap<InstanceId, Instance>,
    next_id: InstanceId,
}

impl Hierarchy {
    pub fn new(root_queue: JobQueue) -> Self {
        let root = Instance {
            info: SubInstance {
                instance_id: ROOT_INSTANCE,
                parent: None,
                granted: None,
            },
            queue: root_queue,
            children: BTreeSet::new(),
        };
        Self {
            instances: [(ROOT_INSTANCE, root)].into(),
            next_id: ROOT_INSTANCE + 1,
        }
    }

    pub fn root(&self) -> &JobQueue {
        &self.instances[&ROOT_INSTANCE].queue
    }

    pub fn root_mut(&mut self) -> &mut JobQueue {
        &mut self.instances.get_mut(&ROOT_INSTANCE).expect("root").queue
    }

    pub fn queue(&self, id: InstanceId) -> Result<&JobQueue, QueueError> {
        self.instances
            .get(&id)
            .map(|i| &i.queue)
            .ok_or(QueueError::UnknownInstance(id))
    }

    pub fn queue_mut(&mut self, id: InstanceId) -> Result<&mut JobQueue, QueueError> {
        self.instances
            .get_mut(&id)
            .map(|i| &mut i.queue)
            .ok_or(QueueError::UnknownInstance(id))
    }

    pub fn instance(&self, id: InstanceId) -> Option<&SubInstance> {
        self.instances.get(&id).map(|i| &i.info)
    }

    pub fn ids(&self) -> Vec<InstanceId> {
        self.instances.keys().copied().collect()
    }

    /// Ranks `id` may hand out: its grant (or all of `full`) minus what its
    /// children hold.
    fn owned(&self, id: InstanceId, full: &Inventory) -> Result<BTreeSet<u32>, QueueError> {
        let inst = self.instances.get(&id).ok_or(QueueError::UnknownInstance(id))?;
        let mut ranks: BTreeSet<u32> = match &inst.info.granted {
            Some(g) => g.clone(),
            None => full.hosts.keys().copied().collect(),
        };
        for child in &inst.children {
            if let Some(g) = self.instances[child].info.granted.as_ref() {
                ranks.retain(|r| !g.contains(r));
            }
        }
        Ok(ranks)
    }

    /// What `id` can schedule on right now.
    pub fn inventory_for(&self, id: InstanceId, full: &Inventory) -> Result<Inventory, QueueError> {
        Ok(full.restrict(&self.owned(id, full)?))
    }

    /// Carves `ranks` out of `parent`'s free ranks into a new child.
    pub fn spawn_subinstance(
        &mut self,
        parent: InstanceId,
        ranks: BTreeSet<u32>,
        full: &Inventory,
        config: QueueConfig,
    ) -> Result<InstanceId, QueueError> {
        let owned = self.owned(parent, full)?;
        let busy = self.instances[&parent].queue.busy_ranks();
        if ranks.is_empty() || !ranks.iter().all(|r| owned.contains(r) && !busy.contains(r)) {
            return Err(QueueError::SlotsUnavailable);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.instances.insert(
            id,
            Instance {
                info: SubInstance {
                    instance_id: id,
                    parent: Some(parent),
                    granted: Some(ranks),
                },
                queue: JobQueue::new(config),
                children: BTreeSet::new(),
            },
        );
        self.instances
            .get_mut(&parent)
            .expect("parent checked")
            .children
            .insert(id);
        Ok(id)
    }

    /// Returns a child's ranks to its parent. The child and its descendants
    /// must have no live jobs.
    pub fn release(&mut self, id: InstanceId) -> Result<BTreeSet<u32>, QueueError> {
        if id == ROOT_INSTANCE {
            return Err(QueueError::UnknownInstance(id));
        }
        let mut subtree = vec![id];
        let mut i = 0;
        while i < subtree.len() {
            let inst = self
                .instances
                .get(&subtree[i])
                .ok_or(QueueError::UnknownInstance(subtree[i]))?;
            if inst.queue.has_live_jobs() {
                return Err(QueueError::InstanceBusy(subtree[i]));
            }
            subtree.extend(inst.children.iter().copied());
            i += 1;
        }
        let removed = self.instances.remove(&id).expect("checked");
        for child in subtree.iter().skip(1) {
            self.instances.remove(child);
        }
        if let Some(parent) = removed.info.parent {
            if let Some(p) = self.instances.get_mut(&parent) {
                p.children.remove(&id);
            }
        }
        Ok(removed.info.granted.unwrap_or_default())
    }

    /// Runs a scheduling cycle in every instance, parents first.
    pub fn schedule_all(&mut self, now: SimTime, full: &Inventory) -> Vec<(InstanceId, Started)> {
        let mut out = Vec::new();
        for id in self.ids() {
            let Ok(inv) = self.inventory_for(id, full) else {
                continue;
            };
            let queue = &mut self.instances.get_mut(&id).expect("listed").queue;
            out.extend(queue.schedule_cycle(now, &inv).into_iter().map(|s| (id, s)));
        }
        out
    }

    /// Checks nesting and sibling disjointness of every grant.
    pub fn check_invariants(&self, full: &Inventory) -> Result<(), String> {
        for (id, inst) in &self.instances {
            let mine: BTreeSet<u32> = match &inst.info.granted {
                Some(g) => g.clone(),
                None => full.hosts.keys().copied().collect(),
            };
            let mut seen = BTreeSet::new();
            for child in &inst.children {
                let g = self.instances[child].info.granted.clone().unwrap_or_default();
                if !g.is_subset(&mine) {
                    return Err(format!("instance {child} grant escapes parent {id}"));
                }
                if !seen.is_disjoint(&g) {
                    return Err(format!("instance {child} overlaps a sibling under {id}"));
                }
                seen.extend(g);
            }
        }
        Ok(())
    }
}
