use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Json;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use minicluster::cluster::LaunchMode;
use minicluster::harness::{
    compare_topologies, cost_report_text, load_scenario, run_scenario, write_csv, write_outputs, RunOptions,
    Scenario, ScenarioError,
};
use minicluster::tenancy::{ApiRequest, ApiResponse, TenancyApi};
use tokio::sync::oneshot;

#[derive(Parser)]
#[command(name = "minicluster", version, about = "Simulate an elastic MiniCluster workload manager")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EmbeddedLead,
    ExternalLauncher,
}

impl From<ModeArg> for LaunchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::EmbeddedLead => LaunchMode::EmbeddedLead,
            ModeArg::ExternalLauncher => LaunchMode::ExternalLauncher,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every size and repetition; write metrics.csv, summary.csv, events.jsonl.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Run repetitions on all cores; output is unchanged.
        #[arg(long)]
        parallel: bool,
    },
    /// Embedded lead against external launcher at each size.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-time versus repeated costs in an event log.
    Cost { eventlog: PathBuf },
    /// Serve the tenancy API over HTTP against a live simulation.
    Serve {
        scenario: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Parse and check a scenario without running it.
    Validate { scenario: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse { .. } | ScenarioError::Invalid(_) => Failure::Validation(e.to_string()),
            ScenarioError::Io(_) | ScenarioError::Runtime(_) => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path, seed_override: bool) -> Result<Scenario, Failure> {
    let sc = load_scenario(path)?;
    sc.validate(seed_override)?;
    Ok(sc)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            scenario,
            seed,
            reps,
            out,
            mode,
            parallel,
        } => {
            let sc = load(&scenario, seed.is_some())?;
            let opts = RunOptions {
                seed,
                reps,
                parallel,
                modes: mode.map(|m| vec![m.into()]),
                keep_logs: true,
            };
            let output = run_scenario(&sc, &opts)?;
            for r in &output.records {
                info!(target: "metrics", "{}", serde_json::to_string(r).unwrap_or_default());
            }
            write_outputs(&output, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{:>6} {:>5} {:>12} {:>12} {:>12} {:>12}", "size", "reps", "creation", "deletion", "wall", "node_s");
            for s in &output.summary {
                println!(
                    "{:>6} {:>5} {:>12.3} {:>12.3} {:>12.3} {:>12.1}",
                    s.size, s.reps, s.creation_mean, s.deletion_mean, s.wall_mean, s.node_seconds_mean
                );
            }
            let incomplete = output.records.iter().filter(|r| !r.completed).count();
            if incomplete > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "{incomplete} run(s) did not finish before the deadline"
                )));
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Compare { scenario, seed, reps, out } => {
            let sc = load(&scenario, seed.is_some())?;
            let rows = compare_topologies(
                &sc,
                &RunOptions {
                    seed,
                    reps,
                    ..RunOptions::default()
                },
            )?;
            println!("{:>6} {:>5} {:>9} {:>9} {:>10}", "size", "rep", "embedded", "external", "ratio");
            for r in &rows {
                println!(
                    "{:>6} {:>5} {:>9} {:>9} {:>10.4}",
                    r.size, r.rep, r.embedded_nodes, r.external_nodes, r.node_seconds_ratio
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).context("creating output directory")?;
                let file = std::fs::File::create(dir.join("compare.csv")).context("creating compare.csv")?;
                write_csv(file, &rows).context("writing compare.csv")?;
            }
            Ok(())
        }
        Command::Cost { eventlog } => {
            let text = std::fs::read_to_string(&eventlog).with_context(|| format!("reading {}", eventlog.display()))?;
            let report = cost_report_text(&text).map_err(Failure::Validation)?;
            println!("{report}");
            Ok(())
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario, false)?;
            println!("{}: ok ({} size(s), {} rep(s))", sc.name, sc.sizes().len(), sc.reps);
            Ok(())
        }
        Command::Serve {
            scenario,
            port,
            seed,
            speed,
        } => {
            let sc = load(&scenario, seed.is_some())?;
            serve(sc, port, seed, speed).map_err(Failure::Runtime)
        }
    }
}

type Call = (ApiRequest, oneshot::Sender<ApiResponse>);

/// The simulation lives on one thread; HTTP handlers talk to it over a
/// channel and the clock follows wall time scaled by `speed`.
fn serve(sc: Scenario, port: u16, seed: Option<u64>, speed: f64) -> Result<()> {
    let seed = seed.or(sc.seed).context("scenario has no seed")?;
    let mut cfg = sc.sim_config(sc.cluster.size, sc.mode)?;
    cfg.delete_when_done = false;
    let mut sim = sc.build(cfg, seed)?;
    sim.set_logging(false);
    let (tx, rx) = mpsc::channel::<Call>();
    std::thread::spawn(move || {
        let mut api = TenancyApi::default();
        let mut last = Instant::now();
        loop {
            let call = rx.recv_timeout(Duration::from_millis(50));
            let now = Instant::now();
            sim.advance(now.duration_since(last).as_secs_f64() * speed);
            last = now;
            match call {
                Ok((req, reply)) => {
                    let _ = reply.send(api.handle(&mut sim, &req));
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let app = axum::Router::new().fallback(handle).with_state(tx);
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

async fn handle(
    State(tx): State<mpsc::Sender<Call>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let mut req = ApiRequest::new(method.as_str(), uri.path());
    for (name, value) in &headers {
        if let Ok(v) = value.to_str() {
            req = req.header(name.as_str(), v);
        }
    }
    req.body = String::from_utf8_lossy(&body).into_owned();
    let (reply_tx, reply_rx) = oneshot::channel();
    if tx.send((req, reply_tx)).is_err() {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    match reply_rx.await {
        Ok(resp) => {
            let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(resp.body)).into_response()
        }
        Err(_) => StatusCode::SERVICE_UNAVAILABLE.into_response(),
    }
}
