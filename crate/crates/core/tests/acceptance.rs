//! Acceptance suite. Runs with `harness = false` and prints one PASS/FAIL
//! line per criterion; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use minicluster::autoscaler::desired_replicas;
use minicluster::burst::{BurstManager, BurstPlugin, MockPlugin};
use minicluster::cluster::{Command, Reply, SimConfig, Simulation, World};
use minicluster::engine::LatencyModel;
use minicluster::harness::{compare_topologies, parse_scenario, run_scenario, write_outputs, RunOptions};
use minicluster::model::{
    AuthMode, JobId, JobState, MiniClusterSpec, NodeId, NodeSpec, ResourceShape, UserCredential,
};
use minicluster::overlay::{BrokerPhase, RetryPolicy};
use minicluster::queue::{
    read_archive, wall_time_model, write_archive, Inventory, JobQueue, JobRequest, QueueConfig,
};
use minicluster::reconciler::{reconcile, request_resize, Action, BatchWidth, DesiredState, PodInstance, PodPhase};
use minicluster::tenancy::{ApiRequest, TenancyApi};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn shape(sockets: u32, cores: u32) -> ResourceShape {
    ResourceShape::new(sockets, cores, 1024).unwrap()
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

// 1 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no scenario files found");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut slowest = 0.0f64;
    for path in &files {
        let sc = parse_scenario(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let mut outputs = Vec::new();
        for (i, parallel) in [false, false, true].into_iter().enumerate() {
            let t = Instant::now();
            let out = run_scenario(
                &sc,
                &RunOptions {
                    parallel,
                    keep_logs: true,
                    ..RunOptions::default()
                },
            )
            .map_err(|e| e.to_string())?;
            let dir = tmp.path().join(format!("{}-{i}", sc.name));
            write_outputs(&out, &dir).map_err(|e| e.to_string())?;
            let elapsed = t.elapsed().as_secs_f64();
            slowest = slowest.max(elapsed);
            ensure!(elapsed < 5.0, "{}: run took {elapsed:.2} s", sc.name);
            let mut bytes = Vec::new();
            for f in ["metrics.csv", "summary.csv", "events.jsonl"] {
                bytes.push(std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
            }
            outputs.push(bytes);
        }
        ensure!(outputs[0] == outputs[1], "{}: two sequential runs differ", sc.name);
        ensure!(outputs[0] == outputs[2], "{}: parallel run differs from sequential", sc.name);
    }
    Ok(format!("{} scenarios byte-identical, slowest run {slowest:.2} s", files.len()))
}

// 2 -----------------------------------------------------------------------

fn desired(size: u32, max: u32) -> DesiredState {
    DesiredState::new(MiniClusterSpec::new("mc", size, max, shape(1, 1)))
}

fn observed(pods: &BTreeMap<u32, PodPhase>) -> Vec<PodInstance> {
    pods.iter().map(|(&i, &p)| PodInstance::new(i, p)).collect()
}

/// Plan shape checks shared by the random and exhaustive runs.
fn check_plan(plan: &[Action], size: u32) -> Result<(), String> {
    let mut last_term: Option<u32> = None;
    for a in plan {
        match *a {
            Action::Terminate(0) => return Err("terminate of index 0".into()),
            Action::Terminate(i) => {
                if let Some(prev) = last_term {
                    ensure!(i < prev, "terminations not descending: {prev} then {i}");
                }
                ensure!(i >= size, "terminate {i} below size {size}");
                last_term = Some(i);
            }
            Action::Create(i) => ensure!(i < size, "create {i} at or above size {size}"),
        }
    }
    Ok(())
}

fn apply(pods: &mut BTreeMap<u32, PodPhase>, plan: &[Action]) {
    for a in plan {
        match *a {
            Action::Create(i) => {
                pods.insert(i, PodPhase::Pending);
            }
            Action::Terminate(i) => {
                pods.insert(i, PodPhase::Terminating);
            }
        }
    }
}

/// Every transition completes at once; returns whether anything moved.
fn settle(pods: &mut BTreeMap<u32, PodPhase>) -> bool {
    let mut moved = false;
    pods.retain(|_, p| {
        match p {
            PodPhase::Pending | PodPhase::Creating => {
                *p = PodPhase::Running;
                moved = true;
            }
            PodPhase::Terminating | PodPhase::Gone => {
                moved = true;
                return false;
            }
            PodPhase::Running => {}
        }
        true
    });
    moved
}

fn fixpoint_rounds(
    pods: &mut BTreeMap<u32, PodPhase>,
    d: &DesiredState,
    width: BatchWidth,
    limit: u32,
) -> Result<u32, String> {
    for round in 0..=limit {
        let plan = reconcile(&observed(pods), d, width);
        check_plan(&plan, d.spec.size)?;
        apply(pods, &plan);
        let moved = settle(pods);
        if plan.is_empty() && !moved {
            let want: BTreeSet<u32> = (0..d.spec.size).collect();
            let have: BTreeSet<u32> = pods.keys().copied().collect();
            ensure!(want == have, "fixpoint holds {have:?}, want {want:?}");
            return Ok(round);
        }
    }
    Err(format!("no fixpoint within {limit} rounds"))
}

fn round_bound(max: u32, width: BatchWidth) -> u32 {
    max / width.0.unwrap_or(max).max(1) + 2
}

/// Declarative per-index planner used as the reference.
fn reference_plan(phases: &[Option<PodPhase>], size: u32, width: Option<u32>) -> Vec<Action> {
    let free = |p: Option<PodPhase>| matches!(p, None | Some(PodPhase::Gone));
    let in_flight = phases
        .iter()
        .filter(|p| matches!(p, Some(PodPhase::Pending | PodPhase::Creating)))
        .count() as u32;
    let mut budget = width.map_or(u32::MAX, |w| w.saturating_sub(in_flight));
    let mut plan = Vec::new();
    for i in 0..size {
        if free(phases.get(i as usize).copied().flatten()) && budget > 0 {
            plan.push(Action::Create(i));
            budget -= 1;
        }
    }
    for i in (1..phases.len() as u32).rev() {
        let p = phases[i as usize];
        if i >= size && matches!(p, Some(PodPhase::Pending | PodPhase::Creating | PodPhase::Running)) {
            plan.push(Action::Terminate(i));
        }
    }
    plan
}

fn reconciler_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut plans = 0u64;
    for seq in 0..1000 {
        let max = rng.random_range(1..=64u32);
        let width = match rng.random_range(0..4) {
            0 => BatchWidth::UNLIMITED,
            _ => BatchWidth::of(rng.random_range(1..=max)),
        };
        let mut d = desired(rng.random_range(1..=max), max);
        let mut pods: BTreeMap<u32, PodPhase> = BTreeMap::new();
        let mut terms_since_resize: Vec<u32> = Vec::new();
        for _ in 0..rng.random_range(1..=8) {
            // A few partial steps with random progress, then a resize.
            for _ in 0..rng.random_range(0..6) {
                let plan = reconcile(&observed(&pods), &d, width);
                plans += 1;
                check_plan(&plan, d.spec.size).map_err(|e| format!("sequence {seq}: {e}"))?;
                for a in &plan {
                    if let Action::Terminate(i) = a {
                        if let Some(&prev) = terms_since_resize.last() {
                            ensure!(*i < prev, "sequence {seq}: terminations ascend across passes");
                        }
                        terms_since_resize.push(*i);
                    }
                }
                apply(&mut pods, &plan);
                for p in pods.values_mut() {
                    if rng.random_bool(0.5) {
                        *p = match *p {
                            PodPhase::Pending => PodPhase::Creating,
                            PodPhase::Creating => PodPhase::Running,
                            PodPhase::Terminating => PodPhase::Gone,
                            other => other,
                        };
                    }
                }
                pods.retain(|_, p| *p != PodPhase::Gone || rng.random_bool(0.5));
            }
            let requested = rng.random_range(-2..=i64::from(max) + 2);
            match request_resize(&d, requested) {
                Ok(next) => {
                    ensure!(next.generation == d.generation + 1, "generation did not advance");
                    d = next;
                    terms_since_resize.clear();
                }
                Err(_) => ensure!(
                    requested < 1 || requested > i64::from(max),
                    "valid size {requested} rejected"
                ),
            }
        }
        fixpoint_rounds(&mut pods, &d, width, round_bound(max, width)).map_err(|e| format!("sequence {seq}: {e}"))?;
    }

    // A slice of the same through the full simulation with invariant checks.
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = rng.random_range(2..=64u32);
        let mut spec = MiniClusterSpec::new("mc", rng.random_range(1..=max), max, shape(1, 4));
        spec.entry_command.clear();
        let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(max, shape(1, 4)));
        cfg.check_invariants = true;
        cfg.batch_width = BatchWidth::of(rng.random_range(0..=8));
        let mut sim = Simulation::new(cfg, seed).map_err(|e| e.to_string())?;
        let mut t = 0.0;
        for _ in 0..rng.random_range(1..=6) {
            t += rng.random_range(1.0..40.0);
            sim.resize_at(t, rng.random_range(-1..=i64::from(max) + 1))
                .map_err(|e| e.to_string())?;
        }
        sim.delete_at(t + 200.0).map_err(|e| e.to_string())?;
        sim.run(1e6);
        ensure!(sim.world().violations().is_empty(), "simulation seed {seed}: {:?}", sim.world().violations());
        ensure!(sim.world().is_deleted(), "simulation seed {seed} never finished deleting");
        let deleting_from = sim.log().iter().position(|r| r.kind == "delete_started").unwrap_or(usize::MAX);
        for (pos, r) in sim.log().iter().enumerate() {
            if r.kind == "pod_terminate" && r.payload["index"] == json!(0) {
                ensure!(pos > deleting_from, "simulation seed {seed}: index 0 terminated by a resize");
            }
        }
    }

    // Exhaustive comparison on every observed state of clusters up to 6.
    const PHASES: [Option<PodPhase>; 6] = [
        None,
        Some(PodPhase::Pending),
        Some(PodPhase::Creating),
        Some(PodPhase::Running),
        Some(PodPhase::Terminating),
        Some(PodPhase::Gone),
    ];
    let mut states = 0u64;
    for max in 1..=6u32 {
        let total = 6u32.pow(max);
        for code in 0..total {
            let mut c = code;
            let phases: Vec<Option<PodPhase>> = (0..max)
                .map(|_| {
                    let p = PHASES[(c % 6) as usize];
                    c /= 6;
                    p
                })
                .collect();
            let obs: Vec<PodInstance> = phases
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.map(|p| PodInstance::new(i as u32, p)))
                .collect();
            for size in 1..=max {
                let d = desired(size, max);
                for w in [Some(1), Some(2), Some(3), None] {
                    let plan = reconcile(&obs, &d, BatchWidth(w));
                    let want = reference_plan(&phases, size, w);
                    ensure!(plan == want, "max {max} size {size} width {w:?} {phases:?}: {plan:?} != {want:?}");
                    states += 1;
                }
                let mut pods: BTreeMap<u32, PodPhase> =
                    obs.iter().map(|p| (p.index, p.phase)).collect();
                fixpoint_rounds(&mut pods, &d, BatchWidth(Some(2)), round_bound(max, BatchWidth(Some(2))) + 1)
                    .map_err(|e| format!("max {max} size {size} {phases:?}: {e}"))?;
            }
        }
    }
    Ok(format!("1000 sequences ({plans} plans), 40 simulations, {states} exhaustive cases"))
}

// 3 -----------------------------------------------------------------------

/// First attempt time at or after `ready` for a broker starting at `start`.
fn first_attempt_after(start: f64, ready: f64, base: f64, mult: f64) -> f64 {
    let (mut t, mut interval) = (start, base);
    while t + 1e-9 < ready {
        t += interval;
        interval *= mult;
    }
    t
}

fn bootstrap_penalty() -> Outcome {
    const POD: f64 = 3.0;
    const START: f64 = 0.35;
    const CONNECT: (f64, f64) = (0.05, 0.05);
    let frozen = [(0.0, 3.35), (0.5, 3.65), (2.0, 6.45), (10.0, 16.05)];
    let mut lines = Vec::new();
    // Latest full time seen for the previous D.
    let mut previous = 0.0f64;
    for (d, frozen_attempt) in frozen {
        let attempt = first_attempt_after(POD + START, POD + d, 0.1, 2.0);
        ensure!((attempt - frozen_attempt).abs() < 1e-9, "oracle drifted for D={d}: {attempt}");
        let (mut earliest, mut latest) = (f64::INFINITY, 0.0f64);
        for seed in 0..10 {
            let spec = MiniClusterSpec::new("mc", 4, 4, shape(1, 4));
            let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(4, shape(1, 4)));
            cfg.latencies.pod_create = LatencyModel::constant("pod_create", POD);
            cfg.latencies.broker_start = LatencyModel::constant("broker_start", START);
            cfg.latencies.connect = LatencyModel::uniform("connect", CONNECT.0, CONNECT.1);
            cfg.retry = RetryPolicy {
                base_interval: 0.1,
                multiplier: 2.0,
                cap: 1e9,
            };
            cfg.lead_delay = d;
            let mut sim = Simulation::new(cfg, seed).map_err(|e| e.to_string())?;
            sim.run_while(1e4, World::is_full);
            let full = sim.world().timeline().cluster_full_at.ok_or("never full")?;
            // One connect sample lies in [base, base + jitter].
            let err = full - (attempt + CONNECT.0);
            ensure!(
                (-1e-9..=CONNECT.1 + 1e-9).contains(&err),
                "D={d} seed {seed}: full at {full:.4}, schedule says {attempt:.4} + connect"
            );
            earliest = earliest.min(full);
            latest = latest.max(full);
        }
        ensure!(earliest + 1e-9 >= previous, "full time decreased at D={d}");
        previous = latest;
        lines.push(format!("D={d}:{attempt:.2}"));
    }
    Ok(format!("attempts {}, all within one connect sample", lines.join(" ")))
}

// 4 -----------------------------------------------------------------------

fn elasticity() -> Outcome {
    for seed in 0..5u64 {
        let spec = MiniClusterSpec::new("mc", 2, 4, shape(1, 4));
        let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(4, shape(1, 4)));
        cfg.delete_when_done = false;
        cfg.check_invariants = true;
        let mut sim = Simulation::new(cfg, seed).map_err(|e| e.to_string())?;
        ensure!(
            sim.world().cluster_config().ranked_hosts().len() == 4,
            "ranked configuration does not list max_size hosts"
        );
        let steady = |sim: &Simulation, size: u32| -> Result<(), String> {
            for (rank, phase) in sim.world().membership() {
                if rank < size {
                    ensure!(phase == BrokerPhase::Online, "seed {seed} size {size}: rank {rank} is {phase:?}");
                } else {
                    ensure!(
                        matches!(phase, BrokerPhase::Down | BrokerPhase::Lost),
                        "seed {seed} size {size}: rank {rank} is {phase:?}"
                    );
                }
            }
            ensure!(sim.world().membership().len() == 4, "membership view is not max_size wide");
            Ok(())
        };
        sim.advance(60.0);
        steady(&sim, 2)?;

        for bad in [0, 5, -1] {
            let generation = sim.world().desired().generation;
            ensure!(sim.resize(bad).is_err(), "size {bad} accepted");
            ensure!(sim.world().desired().generation == generation, "rejected resize changed state");
        }
        let epochs = |sim: &Simulation| -> Vec<u64> {
            (0..2).map(|r| sim.world().overlay().broker(r).map_or(0, |b| b.epoch())).collect()
        };
        let before = epochs(&sim);
        let mark = sim.log().len();
        sim.resize(4).map_err(|e| e.to_string())?;
        sim.advance(60.0);
        steady(&sim, 4)?;
        ensure!(epochs(&sim) == before, "growth restarted an online broker");
        let created: Vec<_> = sim.log()[mark..]
            .iter()
            .filter(|r| r.kind == "pod_create")
            .map(|r| r.payload["index"].as_u64().unwrap_or(99))
            .collect();
        ensure!(created == [2, 3], "growth created {created:?}");

        let mark = sim.log().len();
        sim.resize(1).map_err(|e| e.to_string())?;
        sim.advance(60.0);
        steady(&sim, 1)?;
        let terminated: Vec<_> = sim.log()[mark..]
            .iter()
            .filter(|r| r.kind == "pod_terminate")
            .map(|r| r.payload["index"].as_u64().unwrap_or(99))
            .collect();
        ensure!(terminated == [3, 2, 1], "shrink terminated {terminated:?}");
        ensure!(sim.world().violations().is_empty(), "{:?}", sim.world().violations());
    }
    Ok("2→4→1 over 5 seeds: down ranks exactly [size, 4); bounds, creation, descending termination, no restarts".into())
}

// 5 -----------------------------------------------------------------------

/// Per-socket core use of running jobs, checked against the catalog.
fn socket_overuse(world: &World, catalog: &BTreeMap<NodeId, ResourceShape>) -> Option<String> {
    let mut used: BTreeMap<(NodeId, u32), u32> = BTreeMap::new();
    for job in world.queue().in_state(JobState::Running) {
        for slot in &job.allocation {
            *used.entry((slot.node_id, slot.socket)).or_default() += slot.cores;
        }
    }
    for ((node, socket), cores) in used {
        let Some(shape) = catalog.get(&node) else {
            return Some(format!("job placed on unknown {node}"));
        };
        if socket >= shape.sockets || cores > shape.cores_per_socket {
            return Some(format!("{node} socket {socket}: {cores} cores used"));
        }
    }
    None
}

fn no_oversubscription() -> Outcome {
    let shapes = [shape(1, 8), shape(2, 4), shape(2, 16), shape(4, 6), shape(1, 48)];
    let mut total_jobs = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let nodes = rng.random_range(2..=10u32);
        let catalog: Vec<NodeSpec> = (0..nodes)
            .map(|i| NodeSpec {
                node_id: NodeId(i),
                hostname: format!("n{i}"),
                shape: shapes[rng.random_range(0..shapes.len())],
            })
            .collect();
        let by_id: BTreeMap<NodeId, ResourceShape> = catalog.iter().map(|n| (n.node_id, n.shape)).collect();
        let spec = MiniClusterSpec::new("mc", nodes, nodes, shape(1, 4));
        let mut cfg = SimConfig::new(spec, catalog);
        cfg.check_invariants = true;
        let mut sim = Simulation::new(cfg, seed).map_err(|e| e.to_string())?;
        let jobs = rng.random_range(1..=200);
        total_jobs += jobs;
        for _ in 0..jobs {
            let req = JobRequest::new("flux", rng.random_range(1..=nodes + 1), rng.random_range(1..=50))
                .with_work(rng.random_range(10.0..5000.0), rng.random_range(0.0..0.2));
            sim.submit_at(rng.random_range(0.0..500.0), req).map_err(|e| e.to_string())?;
        }
        let mut overuse = None;
        sim.run_while(1e5, |w| {
            if overuse.is_none() {
                overuse = socket_overuse(w, &by_id);
            }
            w.is_deleted()
        });
        ensure!(overuse.is_none(), "seed {seed}: {}", overuse.unwrap_or_default());
        ensure!(sim.world().violations().is_empty(), "seed {seed}: {:?}", sim.world().violations());
    }

    // Two pods on one node with anti-affinity off both discover the whole host.
    let host = shape(2, 48);
    let spec = MiniClusterSpec::new("mc", 2, 2, host);
    let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(1, host));
    cfg.anti_affinity = false;
    cfg.delete_when_done = false;
    let mut sim = Simulation::new(cfg, 1).map_err(|e| e.to_string())?;
    sim.run_while(1e4, World::is_full);
    let hosts = sim.world().hosts();
    ensure!(hosts.len() == 2, "expected two discovered hosts, got {}", hosts.len());
    let nodes: BTreeSet<NodeId> = hosts.values().map(|h| h.node_id).collect();
    ensure!(nodes.len() == 1, "pods not co-located: {nodes:?}");
    let discovered: u32 = hosts.values().map(|h| h.shape.total_cores()).sum();
    ensure!(discovered == 2 * host.total_cores(), "discovered {discovered} cores");
    Ok(format!(
        "{total_jobs} jobs over 30 mixed catalogs, no socket over capacity; shared node reports {discovered} = 2x{}",
        host.total_cores()
    ))
}

// 6 -----------------------------------------------------------------------

fn fingerprint<'a>(jobs: impl Iterator<Item = &'a minicluster::model::JobRecord>) -> Vec<(u64, String, u64)> {
    let mut v: Vec<_> = jobs
        .filter(|j| !j.state.is_terminal())
        .map(|j| {
            (
                j.job_id().0,
                serde_json::to_string(&j.spec).unwrap(),
                j.remaining_work().to_bits(),
            )
        })
        .collect();
    v.sort();
    v
}

fn save_restore() -> Outcome {
    let host = shape(2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut stranded = 0;
    for trial in 0..100 {
        let source = rng.random_range(2..=16u32);
        let mut queue = JobQueue::new(QueueConfig::default());
        for _ in 0..rng.random_range(1..=30) {
            let req = JobRequest::new("flux", rng.random_range(1..=source * 2), rng.random_range(1..=16))
                .with_work(rng.random_range(100.0..10000.0), rng.random_range(0.0..0.3));
            queue.submit(req, 0.0).map_err(|e| e.to_string())?;
        }
        let inv = Inventory::uniform(0..source, host);
        let started = queue.schedule_cycle(0.0, &inv);
        let t = rng.random_range(0.0..200.0);
        for s in started.iter().filter(|s| s.wall_time <= t) {
            queue.finish(s.job_id, s.wall_time).map_err(|e| e.to_string())?;
        }
        queue.pause_queue(t);
        let snapshot = queue.save_archive(t).map_err(|e| e.to_string())?;
        let before = fingerprint(queue.jobs());

        let mut file = Vec::new();
        write_archive(&mut file, &snapshot).map_err(|e| e.to_string())?;
        let snapshot = read_archive(file.as_slice()).map_err(|e| e.to_string())?;

        let factor = rng.random_range(0.5..=1.5);
        let target = ((f64::from(source) * factor).round() as u32).max(1);
        let spec = MiniClusterSpec::new("dest", target, target, host);
        let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(target, host));
        cfg.delete_when_done = false;
        let mut sim = Simulation::new(cfg, trial).map_err(|e| e.to_string())?;
        sim.run_while(1e4, World::is_full);
        match sim.execute(Command::Restore(snapshot.clone())) {
            Reply::Restored(audit) => ensure!(audit.missing.is_empty(), "trial {trial}: lost {:?}", audit.missing),
            other => return Err(format!("trial {trial}: restore replied {other:?}")),
        }
        let after = fingerprint(sim.world().queue().jobs());
        ensure!(before == after, "trial {trial}: multiset changed across restore ({source} -> {target} nodes)");

        let longest = snapshot
            .jobs
            .iter()
            .map(|j| wall_time_model(&j.spec, 1, 1, 0.0))
            .fold(0.0, f64::max);
        sim.advance(10.0 * longest + 1.0);
        let too_big: Vec<JobId> = snapshot
            .jobs
            .iter()
            .filter(|j| j.spec.nodes > target)
            .map(|j| j.job_id())
            .collect();
        for id in &too_big {
            let state = sim.world().queue().get(*id).map(|j| j.state);
            ensure!(state == Some(JobState::Pending), "trial {trial}: oversized {id} is {state:?}");
        }
        stranded += too_big.len();
    }
    Ok(format!("100 queues conserved through archive file; {stranded} oversized jobs still pending after 10x longest wall time"))
}

// 7 -----------------------------------------------------------------------

fn autoscaler_grid() -> Outcome {
    let mut cases = 0;
    for current in 1..=64u32 {
        for per_mille in [500u32, 900, 1000, 1100, 2000] {
            // Integer oracle: inside the band iff |r - 1| <= 0.1.
            let expected = if per_mille.abs_diff(1000) <= 100 {
                current
            } else {
                (current * per_mille).div_ceil(1000).clamp(1, 64)
            };
            for target in [0.5, 1.0, 2.0, 8.0] {
                let metric = target * f64::from(per_mille) / 1000.0;
                let got = desired_replicas(current, metric, target, 0.1, (1, 64));
                ensure!(
                    got == expected,
                    "current {current} ratio {} target {target}: got {got}, want {expected}",
                    f64::from(per_mille) / 1000.0
                );
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} grid cases match"))
}

// 8 -----------------------------------------------------------------------

fn burst_soundness() -> Outcome {
    let cores = [4u32, 8, 16, 32];
    let (mut bursts, mut trials) = (0, 0);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let local = rng.random_range(1..=8u32);
        let max = local + rng.random_range(0..=24u32);
        let local_shape = shape(1, cores[rng.random_range(0..3)]);
        let plugin_specs: Vec<(u32, ResourceShape)> = (0..rng.random_range(0..=3))
            .map(|_| (rng.random_range(0..=24u32), shape(1, cores[rng.random_range(0..4)])))
            .collect();
        let nodes = rng.random_range(1..=local + 16);
        let tpn = rng.random_range(1..=32u32);
        let burstable = rng.random_bool(0.7);

        let plugins: Vec<Box<dyn BurstPlugin>> = plugin_specs
            .iter()
            .enumerate()
            .map(|(i, &(cap, s))| {
                Box::new(MockPlugin::new(format!("p{i}"), cap, s, LatencyModel::constant("provision", 30.0)))
                    as Box<dyn BurstPlugin>
            })
            .collect();
        let spec = MiniClusterSpec::new("mc", local, max, local_shape);
        let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(local, local_shape));
        cfg.delete_when_done = false;
        cfg.check_invariants = true;
        let mut sim = Simulation::with_bursting(cfg, seed, BurstManager::new(plugins)).map_err(|e| e.to_string())?;
        sim.run_while(1e4, World::is_full);
        let pre = sim.world().membership();
        let at = sim.now() + 1.0;
        sim.submit_at(at, JobRequest::new("flux", nodes, tpn).with_work(500.0, 0.0).burstable(burstable))
            .map_err(|e| e.to_string())?;

        let mut overlap = None;
        sim.run_while(at + 5000.0, |w| {
            if overlap.is_none() {
                let live: Vec<_> = w.burst().live_remotes().map(|r| r.ranks.clone()).collect();
                let pods: BTreeSet<u32> = w.pods().filter(|p| p.phase != PodPhase::Gone).map(|p| p.index).collect();
                for (i, a) in live.iter().enumerate() {
                    if a.clone().any(|r| pods.contains(&r)) {
                        overlap = Some(format!("remote {a:?} overlaps local pods"));
                    }
                    for b in &live[i + 1..] {
                        if a.start < b.end && b.start < a.end {
                            overlap = Some(format!("remotes {a:?} and {b:?} overlap"));
                        }
                    }
                }
            }
            let done = w.queue().jobs().count() == 1 && w.queue().jobs().all(|j| j.state.is_terminal());
            done && w.burst().live_remotes().next().is_none()
        });
        ensure!(overlap.is_none(), "seed {seed}: {}", overlap.unwrap_or_default());

        let capable = if local_shape.total_cores() >= tpn { local } else { 0 };
        let unsatisfiable = nodes > capable;
        let needed = nodes.saturating_sub(capable);
        let plugin_ok = plugin_specs.iter().any(|&(cap, s)| cap >= needed && s.total_cores() >= tpn);
        let fits = local + needed <= max;
        let expected = burstable && unsatisfiable && plugin_ok && fits;
        let burst = sim.world().burst().remotes().next().is_some();
        ensure!(
            !burst || (burstable && unsatisfiable),
            "seed {seed}: burst for a job that was not both burstable and unsatisfiable"
        );
        ensure!(
            burst == expected,
            "seed {seed}: burst={burst}, expected {expected} (local {local}/{max}, job {nodes}x{tpn}, plugins {plugin_specs:?})"
        );
        ensure!(sim.world().violations().is_empty(), "seed {seed}: {:?}", sim.world().violations());
        if burst {
            bursts += 1;
            let job = sim.world().queue().jobs().next().map(|j| j.state);
            ensure!(job == Some(JobState::Completed), "seed {seed}: burst job ended {job:?}");
            ensure!(sim.world().membership() == pre, "seed {seed}: membership differs after teardown");
        }
        trials += 1;
    }
    Ok(format!("{trials} inventories, {bursts} bursts, all disjoint and restored"))
}

// 9 -----------------------------------------------------------------------

fn experiment_shape() -> Outcome {
    let t = Instant::now();
    let sc = parse_scenario(include_str!("../../../scenarios/strong_scaling.toml")).map_err(|e| e.to_string())?;
    ensure!(sc.reps == 20, "scenario has {} reps", sc.reps);
    let out = run_scenario(&sc, &RunOptions::default()).map_err(|e| e.to_string())?;
    let sizes: Vec<u32> = out.summary.iter().map(|s| s.size).collect();
    ensure!(sizes == [8, 16, 32, 64], "sizes {sizes:?}");
    let mut ranks: Vec<u64> = out.records.iter().map(|r| r.ranks).collect();
    ranks.dedup();
    ensure!(ranks == [752, 1504, 3008, 6016], "ranks {ranks:?}");
    ensure!(out.records.iter().all(|r| r.completed), "some runs did not finish");

    let wall: Vec<f64> = out.summary.iter().map(|s| s.wall_mean).collect();
    ensure!(wall.windows(2).all(|w| w[1] < w[0]), "(a) wall means not decreasing: {wall:?}");

    let xs: Vec<f64> = sizes.iter().map(|&s| f64::from(s)).collect();
    let ys: Vec<f64> = out.summary.iter().map(|s| s.creation_mean).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    let worst = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| ((y - (intercept + slope * x)) / (intercept + slope * x)).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 0.15, "(b) creation means {ys:?} deviate {:.1}% from linear fit", worst * 100.0);

    let rows = compare_topologies(&sc, &RunOptions::default()).map_err(|e| e.to_string())?;
    for r in &rows {
        ensure!(
            r.embedded_nodes == r.size as usize && r.external_nodes == r.size as usize + 1,
            "(c) size {} rep {}: billed {} vs {}",
            r.size,
            r.rep,
            r.embedded_nodes,
            r.external_nodes
        );
    }
    let elapsed = t.elapsed().as_secs_f64();
    ensure!(elapsed < 60.0, "took {elapsed:.1} s");
    Ok(format!(
        "wall {:.1}/{:.1}/{:.1}/{:.1}, creation within {:.1}% of fit, N+1 billing on {} pairs, {elapsed:.1} s",
        wall[0],
        wall[1],
        wall[2],
        wall[3],
        worst * 100.0,
        rows.len()
    ))
}

// 10 ----------------------------------------------------------------------

fn api_sim() -> Simulation {
    let host = shape(2, 8);
    let mut spec = MiniClusterSpec::new("mc", 2, 8, host);
    spec.auth_mode = AuthMode::MultiUser;
    spec.interactive = true;
    spec.users = vec![UserCredential::new("alice", "a-pw"), UserCredential::new("bob", "b-pw")];
    let mut cfg = SimConfig::new(spec, SimConfig::uniform_catalog(8, host));
    cfg.delete_when_done = false;
    let mut sim = Simulation::new(cfg, 10).unwrap();
    sim.run_while(1e4, World::is_full);
    sim
}

fn login(api: &mut TenancyApi, sim: &mut Simulation, user: &str, pw: &str) -> Result<String, String> {
    let r = api.handle(sim, &ApiRequest::new("POST", "/v1/auth/token").basic(user, pw));
    ensure!(r.status == 200, "login {user}: {}", r.status);
    r.body["token"].as_str().map(str::to_string).ok_or("no token".into())
}

fn api_contract() -> Outcome {
    let mut sim = api_sim();
    let mut api = TenancyApi::default();
    let alice = login(&mut api, &mut sim, "alice", "a-pw")?;
    let bob = login(&mut api, &mut sim, "bob", "b-pw")?;
    let r = api.handle(
        &mut sim,
        &ApiRequest::post("/v1/jobs", json!({"nodes": 16, "tasks_per_node": 1})).bearer(&alice),
    );
    ensure!(r.status == 201, "submit returned {}", r.status);
    let job = r.body["job_id"].as_u64().ok_or("no job id")?;
    let r = api.handle(&mut sim, &ApiRequest::delete(&format!("/v1/jobs/{job}")).bearer(&bob));
    ensure!(r.status == 403, "cross-user cancel returned {}", r.status);

    let replay = ApiRequest::get("/v1/jobs").bearer(&alice);
    ensure!(api.handle(&mut sim, &replay).status == 200, "live token refused");
    sim.advance(minicluster::tenancy::DEFAULT_TOKEN_TTL + 1.0);
    let r = api.handle(&mut sim, &replay);
    ensure!(r.status == 401, "expired token replay returned {}", r.status);

    let vector = [-1i64, 0, 1, 2, 3, 4, 5, 8, 9, 100, i64::MAX, i64::MIN, 7, 1];
    let mut via_api = api_sim();
    let mut via_cli = api_sim();
    let mut api = TenancyApi::default();
    let token = login(&mut api, &mut via_api, "alice", "a-pw")?;
    let (mut rejected_api, mut rejected_cli) = (Vec::new(), Vec::new());
    for &size in &vector {
        let r = api.handle(
            &mut via_api,
            &ApiRequest::patch("/v1/cluster/size", json!({ "size": size })).bearer(&token),
        );
        if r.status != 200 {
            rejected_api.push(size);
        }
        if via_cli.resize(size).is_err() {
            rejected_cli.push(size);
        }
        via_api.advance(1.0);
        via_cli.advance(1.0);
    }
    ensure!(rejected_api == rejected_cli, "API rejected {rejected_api:?}, CLI rejected {rejected_cli:?}");
    ensure!(
        via_api.world().desired() == via_cli.world().desired(),
        "desired state differs after the shared vector"
    );
    Ok(format!("401 on expired replay, 403 cross-user, shared rejections {rejected_api:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("determinism", determinism),
        ("reconciler safety", reconciler_safety),
        ("bootstrap penalty", bootstrap_penalty),
        ("elasticity", elasticity),
        ("no oversubscription", no_oversubscription),
        ("save/restore conservation", save_restore),
        ("autoscaler formula", autoscaler_grid),
        ("burst soundness", burst_soundness),
        ("experiment shape", experiment_shape),
        ("api contract", api_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} ({secs:.2} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} ({secs:.2} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
