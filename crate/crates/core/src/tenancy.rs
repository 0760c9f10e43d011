//! The lead broker's REST surface.
//!
//! Requests are plain values so the same handler serves in-process tests and
//! the socket server. Mutations go through the simulation's command queue;
//! reads look at the world as of the drain.
//!
//! | method | path                | auth    | success |
//! |--------|---------------------|---------|---------|
//! | POST   | `/v1/auth/token`    | Basic   | 200     |
//! | POST   | `/v1/jobs`          | Bearer  | 201     |
//! | GET    | `/v1/jobs`          | Bearer  | 200     |
//! | GET    | `/v1/jobs/{id}`     | Bearer  | 200     |
//! | DELETE | `/v1/jobs/{id}`     | Bearer  | 200     |
//! | PATCH  | `/v1/cluster/size`  | Bearer  | 200     |
//! | GET    | `/v1/metrics`       | none    | 200     |

use std::collections::BTreeMap;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{Command, CommandError, Reply, Simulation};
use crate::model::{AuthMode, JobId, JobRecord, MiniClusterSpec, SimTime};
use crate::queue::{JobRequest, QueueError};

pub const DEFAULT_TOKEN_TTL: f64 = 3600.0;

/// User name for submissions when authentication is off.
pub const SHARED_USER: &str = "flux";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthToken {
    pub token: String,
    pub user: String,
    pub issued_at: SimTime,
    pub expires_at: SimTime,
}

impl AuthToken {
    pub fn is_live(&self, now: SimTime) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    /// Lowercase header names.
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            ..Self::default()
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new("GET", path)
    }

    pub fn post(path: &str, body: Value) -> Self {
        Self::new("POST", path).body(body)
    }

    pub fn patch(path: &str, body: Value) -> Self {
        Self::new("PATCH", path).body(body)
    }

    pub fn delete(path: &str) -> Self {
        Self::new("DELETE", path)
    }

    pub fn body(mut self, body: Value) -> Self {
        self.body = body.to_string();
        self
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("authorization", &format!("Bearer {token}"))
    }

    pub fn basic(self, user: &str, password: &str) -> Self {
        let encoded = base64::engine::general_purpose::STANDARD.encode(format!("{user}:{password}"));
        self.header("authorization", &format!("Basic {encoded}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: Value) -> Self {
        Self { status, body }
    }

    fn error(status: u16, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "detail": detail.into() }),
        }
    }

    pub fn error_code(&self) -> Option<&str> {
        self.body.get("error").and_then(Value::as_str)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    nodes: u32,
    tasks_per_node: u32,
    #[serde(default)]
    work_units: Option<f64>,
    #[serde(default)]
    serial_fraction: Option<f64>,
    #[serde(default)]
    burstable: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResizeBody {
    size: i64,
}

pub fn auth_enabled(spec: &MiniClusterSpec) -> bool {
    spec.auth_mode == AuthMode::MultiUser || !spec.users.is_empty()
}

fn job_view(job: &JobRecord) -> Value {
    json!({
        "job_id": job.spec.job_id,
        "user": job.spec.user,
        "state": job.state,
        "nodes": job.spec.nodes,
        "tasks_per_node": job.spec.tasks_per_node,
        "burstable": job.spec.burstable,
        "submit_time": job.submit_time,
        "start_time": job.start_time,
        "end_time": job.end_time,
        "ranks": job.ranks(),
        "remaining": job.remaining,
    })
}

fn command_error(e: &CommandError) -> ApiResponse {
    match e {
        CommandError::Queue(QueueError::UnknownJob(id)) => ApiResponse::error(404, "unknown_job", format!("job {id}")),
        CommandError::Queue(QueueError::InvalidSpec(m)) => ApiResponse::error(400, "invalid_spec", m.to_string()),
        CommandError::Queue(e @ QueueError::InvalidTransition { .. }) => {
            ApiResponse::error(409, "invalid_transition", e.to_string())
        }
        CommandError::Queue(e) => ApiResponse::error(409, "queue_error", e.to_string()),
        CommandError::Forbidden(id) => ApiResponse::error(403, "forbidden", format!("job {id} belongs to another user")),
        CommandError::Resize(e) => ApiResponse::error(409, "size_out_of_bounds", e.to_string()),
    }
}

/// Token store plus routing.
#[derive(Debug, Clone)]
pub struct TenancyApi {
    pub ttl: f64,
    tokens: BTreeMap<String, AuthToken>,
}

impl Default for TenancyApi {
    fn default() -> Self {
        Self::new(DEFAULT_TOKEN_TTL)
    }
}

impl TenancyApi {
    pub fn new(ttl: f64) -> Self {
        Self {
            ttl,
            tokens: BTreeMap::new(),
        }
    }

    /// Exchanges base64 `user:password` for a token.
    pub fn authenticate(&mut self, sim: &mut Simulation, credentials: &str) -> Result<AuthToken, ApiResponse> {
        let spec = sim.world().spec().clone();
        if !auth_enabled(&spec) {
            return Err(ApiResponse::error(403, "auth_disabled_misuse", "authentication is not enabled"));
        }
        let invalid = || ApiResponse::error(401, "invalid_credentials", "unknown user or wrong password");
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(credentials.trim())
            .ok()
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or_else(invalid)?;
        let (user, password) = decoded.split_once(':').ok_or_else(invalid)?;
        let allowed: &[_] = match spec.auth_mode {
            AuthMode::MultiUser => &spec.users,
            AuthMode::SingleUser => &spec.users[..1],
        };
        if !allowed.iter().any(|c| c.username == user && c.verify(password)) {
            return Err(invalid());
        }
        let now = sim.now();
        let token = AuthToken {
            token: sim.random_token(),
            user: user.to_string(),
            issued_at: now,
            expires_at: now + self.ttl,
        };
        self.tokens.insert(token.token.clone(), token.clone());
        Ok(token)
    }

    /// The caller's user name, or an error response.
    fn caller(&self, sim: &Simulation, req: &ApiRequest) -> Result<Option<String>, ApiResponse> {
        if !auth_enabled(sim.world().spec()) {
            return Ok(None);
        }
        let header = req.headers.get("authorization").map(String::as_str).unwrap_or("");
        let Some(token) = header.strip_prefix("Bearer ") else {
            return Err(ApiResponse::error(401, "missing_token", "a bearer token is required"));
        };
        match self.tokens.get(token.trim()) {
            Some(t) if t.is_live(sim.now()) => Ok(Some(t.user.clone())),
            Some(_) => Err(ApiResponse::error(401, "token_expired", "re-authenticate")),
            None => Err(ApiResponse::error(401, "invalid_token", "unknown token")),
        }
    }

    pub fn handle(&mut self, sim: &mut Simulation, req: &ApiRequest) -> ApiResponse {
        let path = req.path.split('?').next().unwrap_or("").trim_end_matches('/');
        let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        match (req.method.as_str(), segments.as_slice()) {
            ("POST", ["v1", "auth", "token"]) => self.token(sim, req),
            ("GET", ["v1", "metrics"]) => {
                let sample = sim.world().metric_sample(sim.now());
                ApiResponse::ok(200, serde_json::to_value(sample).unwrap_or_default())
            }
            (method, ["v1", "jobs"]) => {
                let user = match self.caller(sim, req) {
                    Ok(u) => u,
                    Err(r) => return r,
                };
                match method {
                    "POST" => submit(sim, req, user),
                    "GET" => {
                        let jobs: Vec<Value> = sim.world().queue().jobs().map(job_view).collect();
                        ApiResponse::ok(200, json!({ "jobs": jobs }))
                    }
                    _ => ApiResponse::error(405, "method_not_allowed", method.to_string()),
                }
            }
            (method, ["v1", "jobs", id]) => {
                let user = match self.caller(sim, req) {
                    Ok(u) => u,
                    Err(r) => return r,
                };
                let Ok(id) = id.parse::<u64>().map(JobId) else {
                    return ApiResponse::error(400, "invalid_job_id", id.to_string());
                };
                match method {
                    "GET" => match sim.world().queue().get(id) {
                        Some(job) => ApiResponse::ok(200, job_view(job)),
                        None => ApiResponse::error(404, "unknown_job", format!("job {id}")),
                    },
                    "DELETE" => match sim.execute(Command::Cancel { job: id, user }) {
                        Reply::Canceled(job) => ApiResponse::ok(200, job_view(&job)),
                        Reply::Failed(e) => command_error(&e),
                        other => ApiResponse::error(500, "unexpected_reply", format!("{other:?}")),
                    },
                    _ => ApiResponse::error(405, "method_not_allowed", method.to_string()),
                }
            }
            ("PATCH", ["v1", "cluster", "size"]) => {
                if let Err(r) = self.caller(sim, req) {
                    return r;
                }
                let body: ResizeBody = match serde_json::from_str(&req.body) {
                    Ok(b) => b,
                    Err(e) => return ApiResponse::error(400, "invalid_body", e.to_string()),
                };
                match sim.execute(Command::Resize(body.size)) {
                    Reply::Resized { generation, size } => {
                        ApiResponse::ok(200, json!({ "size": size, "generation": generation }))
                    }
                    Reply::Failed(e) => command_error(&e),
                    other => ApiResponse::error(500, "unexpected_reply", format!("{other:?}")),
                }
            }
            _ => ApiResponse::error(404, "not_found", req.path.clone()),
        }
    }

    fn token(&mut self, sim: &mut Simulation, req: &ApiRequest) -> ApiResponse {
        let header = req.headers.get("authorization").map(String::as_str).unwrap_or("");
        let credentials = match header.strip_prefix("Basic ") {
            Some(c) => c.to_string(),
            None => match serde_json::from_str::<Value>(&req.body)
                .ok()
                .and_then(|v| v.get("credentials").and_then(Value::as_str).map(str::to_string))
            {
                Some(c) => c,
                None if !auth_enabled(sim.world().spec()) => String::new(),
                None => return ApiResponse::error(400, "invalid_body", "basic credentials required"),
            },
        };
        match self.authenticate(sim, &credentials) {
            Ok(token) => ApiResponse::ok(200, serde_json::to_value(token).unwrap_or_default()),
            Err(r) => r,
        }
    }
}

fn submit(sim: &mut Simulation, req: &ApiRequest, user: Option<String>) -> ApiResponse {
    let body: SubmitBody = match serde_json::from_str(&req.body) {
        Ok(b) => b,
        Err(e) => return ApiResponse::error(400, "invalid_body", e.to_string()),
    };
    let user = user.unwrap_or_else(|| SHARED_USER.to_string());
    let mut request = JobRequest::new(user, body.nodes, body.tasks_per_node).burstable(body.burstable);
    if body.work_units.is_some() || body.serial_fraction.is_some() {
        let work = body.work_units.unwrap_or(request.work_units);
        request = request.with_work(
            work,
            body.serial_fraction.unwrap_or(0.0),
        );
    }
    match sim.execute(Command::Submit(request)) {
        Reply::Submitted(id) => {
            let job = sim.world().queue().get(id).map(job_view).unwrap_or_default();
            ApiResponse::ok(201, json!({ "job_id": id, "job": job }))
        }
        Reply::Failed(e) => command_error(&e),
        other => ApiResponse::error(500, "unexpected_reply", format!("{other:?}")),
    }
}
