//! Queue archives.
//!
//! On disk an archive is JSON lines. The first line is the header
//! `{"saved_at", "next_job_id", "jobs"}` (job count); each following line is
//! one job record with fields in this order: `spec` (`job_id`, `user`,
//! `nodes`, `tasks_per_node`, `work_units`, `serial_fraction`, `burstable`),
//! `state`, `submit_time`, `start_time`, `end_time`, `allocation`,
//! `remaining`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{JobQueue, QueueError};
use crate::model::{ArchiveSnapshot, JobId, JobRecord, JobState, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    saved_at: SimTime,
    next_job_id: u64,
    jobs: usize,
}

/// What a restore did, so a lossy transfer would be visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreAudit {
    pub saved: usize,
    pub restored: usize,
    pub missing: Vec<JobId>,
}

pub(super) fn save(queue: &JobQueue, now: SimTime) -> Result<ArchiveSnapshot, QueueError> {
    if !queue.paused {
        return Err(QueueError::NotPaused);
    }
    let jobs = queue
        .jobs
        .values()
        .filter(|j| matches!(j.state, JobState::Pending | JobState::Paused | JobState::Running))
        .cloned()
        .collect();
    Ok(ArchiveSnapshot {
        saved_at: now,
        jobs,
        next_job_id: queue.next_job_id,
    })
}

pub(super) fn restore(queue: &mut JobQueue, snapshot: &ArchiveSnapshot) -> Result<RestoreAudit, QueueError> {
    let mut seen = BTreeSet::new();
    for job in &snapshot.jobs {
        let id = job.job_id();
        if queue.jobs.contains_key(&id) || !seen.insert(id) {
            return Err(QueueError::IdCollision(id));
        }
        if job.state.is_terminal() {
            return Err(QueueError::Archive(format!("job {id} is {:?}", job.state)));
        }
    }
    for job in &snapshot.jobs {
        // The old allocation means nothing on the new cluster: paused and
        // running work is requeued with its remaining fraction intact.
        let mut record: JobRecord = job.clone();
        record.state = JobState::Pending;
        record.allocation.clear();
        if !queue.accounting.knows(&record.spec.user) {
            queue.accounting.register(&record.spec.user, 1.0);
        }
        queue.insert_record(record);
    }
    queue.next_job_id = queue.next_job_id.max(snapshot.next_job_id);
    let missing = snapshot
        .jobs
        .iter()
        .map(|j| j.job_id())
        .filter(|id| !queue.jobs.contains_key(id))
        .collect();
    Ok(RestoreAudit {
        saved: snapshot.jobs.len(),
        restored: snapshot.jobs.len(),
        missing,
    })
}

pub fn write_archive<W: Write>(out: &mut W, snapshot: &ArchiveSnapshot) -> std::io::Result<()> {
    let header = Header {
        saved_at: snapshot.saved_at,
        next_job_id: snapshot.next_job_id,
        jobs: snapshot.jobs.len(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for job in &snapshot.jobs {
        serde_json::to_writer(&mut *out, job)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_archive<R: BufRead>(input: R) -> Result<ArchiveSnapshot, QueueError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| QueueError::Archive("empty archive".into()))?;
    let first = first.map_err(|e| QueueError::Archive(e.to_string()))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| QueueError::Archive(format!("line 1: {e}")))?;
    let mut jobs = Vec::with_capacity(header.jobs);
    for (i, line) in lines {
        let line = line.map_err(|e| QueueError::Archive(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let job: JobRecord = serde_json::from_str(&line)
            .map_err(|e| QueueError::Archive(format!("line {}: {e}", i + 1)))?;
        jobs.push(job);
    }
    if jobs.len() != header.jobs {
        return Err(QueueError::Archive(format!(
            "header lists {} jobs, found {}",
            header.jobs,
            jobs.len()
        )));
    }
    Ok(ArchiveSnapshot {
        saved_at: header.saved_at,
        jobs,
        next_job_id: header.next_job_id,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Inventory, JobRequest};
    use super::*;
    use crate::model::ResourceShape;

    fn shape() -> ResourceShape {
        ResourceShape::new(2, 8, 64).unwrap()
    }

    #[test]
    fn save_requires_pause() {
        let q = JobQueue::default();
        assert_eq!(q.save_archive(0.0), Err(QueueError::NotPaused));
    }

    #[test]
    fn empty_roundtrip() {
        let mut q = JobQueue::default();
        q.pause_queue(0.0);
        let snap = q.save_archive(1.0).unwrap();
        let mut target = JobQueue::default();
        target.restore_archive(&snap).unwrap();
        assert_eq!(target.jobs().count(), 0);
    }

    #[test]
    fn five_jobs_move_to_larger_cluster() {
        let mut q = JobQueue::default();
        let ids: Vec<_> = (0..5)
            .map(|i| q.submit(JobRequest::new("u", 1 + i % 2, 4), 0.0).unwrap())
            .collect();
        q.schedule_cycle(0.0, &Inventory::uniform(0..4, shape()));
        q.pause_queue(0.5);
        let snap = q.save_archive(0.5).unwrap();

        let mut buf = Vec::new();
        write_archive(&mut buf, &snap).unwrap();
        let back = read_archive(buf.as_slice()).unwrap();
        assert_eq!(back, snap);

        let mut target = JobQueue::default();
        let audit = target.restore_archive(&back).unwrap();
        assert_eq!(audit.restored, 5);
        assert!(audit.missing.is_empty());
        let restored: Vec<_> = target.jobs().map(|j| j.job_id()).collect();
        assert_eq!(restored, ids);
        assert!(target.jobs().all(|j| j.state == JobState::Pending));
        assert_eq!(target.schedule_cycle(10.0, &Inventory::uniform(0..8, shape())).len(), 5);
    }

    #[test]
    fn collision_rejected() {
        let mut q = JobQueue::default();
        q.submit(JobRequest::new("u", 1, 1), 0.0).unwrap();
        q.pause_queue(0.0);
        let snap = q.save_archive(0.0).unwrap();
        let mut target = JobQueue::default();
        target.submit(JobRequest::new("v", 1, 1), 0.0).unwrap();
        assert_eq!(target.restore_archive(&snap), Err(QueueError::IdCollision(JobId(1))));
    }

    #[test]
    fn truncated_file_detected() {
        let text = "{\"saved_at\":0.0,\"next_job_id\":3,\"jobs\":2}\n";
        assert!(matches!(read_archive(text.as_bytes()), Err(QueueError::Archive(_))));
    }
}
