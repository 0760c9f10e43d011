//! Repetitions over a size sweep, metrics CSVs and the combined event log.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{Scenario, ScenarioError};
use crate::cluster::LaunchMode;
use crate::engine::{derive_seed, write_log, LogRecord};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub mode: LaunchMode,
    pub size: u32,
    pub rep: u32,
    pub seed: u64,
    pub ranks: u64,
    pub creation_time: Option<f64>,
    pub deletion_time: Option<f64>,
    pub launcher_time: Option<f64>,
    pub wall_time: Option<f64>,
    pub node_seconds_billed: f64,
    pub billed_nodes: usize,
    pub one_time_costs: usize,
    pub repeated_costs: usize,
    pub completed: bool,
}

/// One row of `summary.csv`: mean and sample standard deviation per size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub mode: LaunchMode,
    pub size: u32,
    pub reps: usize,
    pub creation_mean: f64,
    pub creation_std: f64,
    pub deletion_mean: f64,
    pub deletion_std: f64,
    pub launcher_mean: f64,
    pub launcher_std: f64,
    pub wall_mean: f64,
    pub wall_std: f64,
    pub node_seconds_mean: f64,
    pub node_seconds_std: f64,
    pub billed_nodes_mean: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub reps: Option<u32>,
    /// Run repetitions on a thread pool. Output order and content do not
    /// change.
    pub parallel: bool,
    /// Defaults to the scenario's mode.
    pub modes: Option<Vec<LaunchMode>>,
    pub keep_logs: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    /// Per-run label and log, in run order.
    pub logs: Vec<(String, Vec<LogRecord>)>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mode_name(mode: LaunchMode) -> &'static str {
    match mode {
        LaunchMode::EmbeddedLead => "embedded_lead",
        LaunchMode::ExternalLauncher => "external_launcher",
    }
}

pub fn run_label(scenario: &str, mode: LaunchMode, size: u32, rep: u32) -> String {
    format!("{scenario}/{}/size{size}/rep{rep}", mode_name(mode))
}

struct RepJob {
    mode: LaunchMode,
    size: u32,
    rep: u32,
    seed: u64,
    cfg: crate::cluster::SimConfig,
}

fn run_rep(sc: &Scenario, job: RepJob, keep_log: bool) -> Result<(MetricsRecord, Vec<LogRecord>), ScenarioError> {
    let expect_delete = job.cfg.delete_when_done;
    let mut sim = sc.build(job.cfg, job.seed)?;
    sim.set_logging(keep_log);
    sim.run(sc.deadline);
    let report = sim.report();
    let completed = sim.world().is_deleted() || !expect_delete;
    let record = MetricsRecord {
        scenario: sc.name.clone(),
        mode: job.mode,
        size: job.size,
        rep: job.rep,
        seed: job.seed,
        ranks: report.ranks,
        creation_time: report.creation_time,
        deletion_time: report.deletion_time,
        launcher_time: report.launcher_time,
        wall_time: report.wall_time,
        node_seconds_billed: report.node_seconds,
        billed_nodes: report.billed_nodes,
        one_time_costs: report.one_time_costs,
        repeated_costs: report.repeated_costs,
        completed,
    };
    Ok((record, sim.take_log()))
}

/// Runs every (mode, size, rep) of the scenario. Seeds depend only on the
/// base seed, size and rep, so both modes of a comparison see the same
/// draws per repetition.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunOutput, ScenarioError> {
    sc.validate(opts.seed.is_some())?;
    let seed = opts.seed.or(sc.seed).expect("validated");
    let reps = opts.reps.unwrap_or(sc.reps);
    if reps == 0 {
        return Err(ScenarioError::Invalid(vec!["reps must be at least 1".into()]));
    }
    let modes = opts.modes.clone().unwrap_or_else(|| vec![sc.mode]);
    let mut jobs = Vec::new();
    for &mode in &modes {
        for &size in &sc.sizes() {
            let mut cfg = sc.sim_config(size, mode)?;
            if cfg.costs.image_pull && cfg.costs.pull_cache && sc.costs.throwaway_run {
                let mut warm = sc.build(cfg.clone(), derive_seed(seed, &[u64::from(size), u64::MAX]))?;
                warm.set_logging(false);
                warm.run(sc.deadline);
                cfg.warm_pull_cache = warm.world().pull_cache().clone();
            }
            for rep in 0..reps {
                jobs.push(RepJob {
                    mode,
                    size,
                    rep,
                    seed: derive_seed(seed, &[u64::from(size), u64::from(rep)]),
                    cfg: cfg.clone(),
                });
            }
        }
    }
    let results: Vec<_> = if opts.parallel {
        jobs.into_par_iter().map(|j| run_rep(sc, j, opts.keep_logs)).collect()
    } else {
        jobs.into_iter().map(|j| run_rep(sc, j, opts.keep_logs)).collect()
    };
    let mut out = RunOutput::default();
    for r in results {
        let (record, log) = r?;
        if opts.keep_logs {
            out.logs.push((run_label(&sc.name, record.mode, record.size, record.rep), log));
        }
        out.records.push(record);
    }
    out.summary = summarize(&out.records);
    Ok(out)
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, u8, u32), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.scenario.clone(), r.mode as u8, r.size))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|rows| {
            let stat = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
                mean_std(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let creation = stat(&|r| r.creation_time);
            let deletion = stat(&|r| r.deletion_time);
            let launcher = stat(&|r| r.launcher_time);
            let wall = stat(&|r| r.wall_time);
            let node_seconds = stat(&|r| Some(r.node_seconds_billed));
            let billed = stat(&|r| Some(r.billed_nodes as f64));
            SummaryRow {
                scenario: rows[0].scenario.clone(),
                mode: rows[0].mode,
                size: rows[0].size,
                reps: rows.len(),
                creation_mean: creation.0,
                creation_std: creation.1,
                deletion_mean: deletion.0,
                deletion_std: deletion.1,
                launcher_mean: launcher.0,
                launcher_std: launcher.1,
                wall_mean: wall.0,
                wall_std: wall.1,
                node_seconds_mean: node_seconds.0,
                node_seconds_std: node_seconds.1,
                billed_nodes_mean: billed.0,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize, W: Write>(out: W, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(io::Error::other)?;
    }
    w.flush()
}

/// Writes `metrics.csv`, `summary.csv` and, if logs were kept,
/// `events.jsonl` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(fs::File::create(dir.join("metrics.csv"))?, &out.records)?;
    write_csv(fs::File::create(dir.join("summary.csv"))?, &out.summary)?;
    if !out.logs.is_empty() {
        let mut f = io::BufWriter::new(fs::File::create(dir.join("events.jsonl"))?);
        for (label, log) in &out.logs {
            write_log(&mut f, Some(label), log)?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Embedded lead against external launcher for the same sizes and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub size: u32,
    pub rep: u32,
    pub embedded_nodes: usize,
    pub external_nodes: usize,
    pub embedded_node_seconds: f64,
    pub external_node_seconds: f64,
    pub node_seconds_ratio: f64,
    pub embedded_wall: Option<f64>,
    pub external_wall: Option<f64>,
}

pub fn compare_topologies(sc: &Scenario, opts: &RunOptions) -> Result<Vec<ComparisonRow>, ScenarioError> {
    let opts = RunOptions {
        modes: Some(vec![LaunchMode::EmbeddedLead, LaunchMode::ExternalLauncher]),
        ..opts.clone()
    };
    let out = run_scenario(sc, &opts)?;
    let (embedded, external): (Vec<_>, Vec<_>) = out
        .records
        .iter()
        .partition(|r| r.mode == LaunchMode::EmbeddedLead);
    Ok(embedded
        .iter()
        .zip(&external)
        .map(|(a, b)| ComparisonRow {
            size: a.size,
            rep: a.rep,
            embedded_nodes: a.billed_nodes,
            external_nodes: b.billed_nodes,
            embedded_node_seconds: a.node_seconds_billed,
            external_node_seconds: b.node_seconds_billed,
            node_seconds_ratio: b.node_seconds_billed / a.node_seconds_billed,
            embedded_wall: a.wall_time,
            external_wall: b.wall_time,
        })
        .collect())
}
