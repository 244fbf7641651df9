//! HTTP control API for stepped runs and score entry.
//!
//! | method | path                         | body                                   |
//! |--------|------------------------------|----------------------------------------|
//! | POST   | `/api/runs`                  | `{seed?, model?}` starts a stepped run |
//! | GET    | `/api/run/state`             |                                        |
//! | GET    | `/api/run/events?since=N`    |                                        |
//! | GET    | `/api/run/events/stream`     | server-sent events, snapshot then live |
//! | GET    | `/api/run/transcript`        | JSON-lines transcript                  |
//! | POST   | `/api/run/step`              |                                        |
//! | POST   | `/api/run/auto`              | `{on}`                                 |
//! | POST   | `/api/run/perturb`           | `{content}`                            |
//! | POST   | `/api/run/ask`               | `{agent_id, question}`                 |
//! | GET    | `/api/run/memory/{agent_id}` |                                        |
//! | GET    | `/api/scores`                | scores CSV                             |
//! | POST   | `/api/scores`                | `{run_id, rater_id, score, scenario_id?}` |
//!
//! Errors are `{"error": <kind>, "message": <text>}` with a matching status.

use std::convert::Infallible;
use std::fs::{self, OpenOptions};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use delib_core::engine::{Controller, RunConfig, RunState, Simulation};
use delib_core::{AgentId, EngineError, PromptTemplates, Roster, Scenario, TranscriptEvent};
use futures::stream::{self, Stream};
use log::info;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::commands::BackendSpec;
use crate::error::CliError;

pub struct ServerConfig {
    pub scenario: Scenario,
    pub roster: Roster,
    pub templates: PromptTemplates,
    pub backend: BackendSpec,
    pub model: String,
    pub seed: i64,
    /// Finished runs are written to `<out>/<run_id>/`.
    pub out: PathBuf,
    pub scores: PathBuf,
    pub auto_interval: Duration,
    pub addr: String,
}

pub struct AppState {
    config: ServerConfig,
    run: Mutex<Option<Arc<Controller>>>,
    scores_lock: Mutex<()>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            config,
            run: Mutex::new(None),
            scores_lock: Mutex::new(()),
        })
    }

    fn current(&self) -> Result<Arc<Controller>, ApiError> {
        self.run
            .lock()
            .expect("run lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_run", "no run has been started"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Phase(_) | EngineError::Finished | EngineError::Aborted(_) => {
                StatusCode::CONFLICT
            }
            EngineError::UnknownAgent(_) => StatusCode::NOT_FOUND,
            EngineError::Validation(_) | EngineError::Parse(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Backend { .. } | EngineError::EmptyResponse { .. } => {
                StatusCode::BAD_GATEWAY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let c = CliError::from(e);
        ApiError::new(status, c.kind, c.message)
    }
}

impl From<CliError> for ApiError {
    fn from(c: CliError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, c.kind, c.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.kind, "message": self.message});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a blocking controller call off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, EngineError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Serialize)]
struct Emitted {
    events: Vec<TranscriptEvent>,
    state: RunState,
}

#[derive(Debug, Default, Deserialize)]
struct StartRun {
    seed: Option<i64>,
    model: Option<String>,
}

async fn start_run(
    State(app): State<Arc<AppState>>,
    body: Option<Json<StartRun>>,
) -> ApiResult<(StatusCode, Json<RunState>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let app2 = app.clone();
    let controller = tokio::task::spawn_blocking(move || -> Result<Controller, ApiError> {
        let c = &app2.config;
        let backend = c.backend.build()?;
        let config = RunConfig::stepped(req.seed.unwrap_or(c.seed))
            .with_model(req.model.unwrap_or_else(|| c.model.clone()));
        let sim = Simulation::new(
            c.scenario.clone(),
            c.roster.clone(),
            backend,
            c.templates.clone(),
            config,
        )?;
        let out = c.out.join(sim.run_id());
        Ok(Controller::spawn(sim, Some(out), c.auto_interval))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let controller = Arc::new(controller);
    let previous = app.run.lock().expect("run lock").replace(controller.clone());
    if let Some(old) = previous {
        // Dropping the last handle joins the engine thread.
        tokio::task::spawn_blocking(move || drop(old));
    }
    let state = blocking(move || controller.state()).await?;
    info!("started run {}", state.run_id);
    Ok((StatusCode::CREATED, Json(state)))
}

async fn run_state(State(app): State<Arc<AppState>>) -> ApiResult<Json<RunState>> {
    let c = app.current()?;
    Ok(Json(blocking(move || c.state()).await?))
}

#[derive(Deserialize)]
struct Since {
    since: Option<u64>,
}

async fn events(
    State(app): State<Arc<AppState>>,
    Query(q): Query<Since>,
) -> ApiResult<Json<Vec<TranscriptEvent>>> {
    let c = app.current()?;
    let since = q.since.unwrap_or(0);
    Ok(Json(c.events().into_iter().filter(|e| e.index >= since).collect()))
}

async fn event_stream(
    State(app): State<Arc<AppState>>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let c = app.current()?;
    let sub = c.subscribe();
    let (tx, rx) = mpsc::unbounded_channel();
    thread::spawn(move || {
        for e in sub {
            if tx.send(Some(e)).is_err() {
                return;
            }
        }
        let _ = tx.send(None);
    });
    let s = stream::unfold(Some(rx), |rx| async move {
        let mut rx = rx?;
        match rx.recv().await {
            Some(Some(e)) => {
                let ev = Event::default()
                    .id(e.index.to_string())
                    .event("transcript")
                    .json_data(&e)
                    .expect("event serializes");
                Some((Ok(ev), Some(rx)))
            }
            _ => Some((Ok(Event::default().event("end").data("closed")), None)),
        }
    });
    Ok(Sse::new(s).keep_alive(KeepAlive::default()))
}

async fn transcript(State(app): State<Arc<AppState>>) -> ApiResult<Response> {
    let c = app.current()?;
    let t = blocking(move || c.transcript()).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], t.to_jsonl()).into_response())
}

async fn emitted(
    c: Arc<Controller>,
    f: impl FnOnce(&Controller) -> Result<Vec<TranscriptEvent>, EngineError> + Send + 'static,
) -> ApiResult<Json<Emitted>> {
    let r = blocking(move || {
        let events = f(&c)?;
        Ok(Emitted {
            events,
            state: c.state()?,
        })
    })
    .await?;
    Ok(Json(r))
}

async fn step(State(app): State<Arc<AppState>>) -> ApiResult<Json<Emitted>> {
    emitted(app.current()?, |c| c.step()).await
}

#[derive(Deserialize)]
struct Auto {
    on: bool,
}

async fn auto(State(app): State<Arc<AppState>>, Json(b): Json<Auto>) -> ApiResult<Json<RunState>> {
    let c = app.current()?;
    Ok(Json(blocking(move || c.set_auto(b.on)).await?))
}

#[derive(Deserialize)]
struct Perturb {
    content: String,
}

async fn perturb(
    State(app): State<Arc<AppState>>,
    Json(b): Json<Perturb>,
) -> ApiResult<Json<Emitted>> {
    emitted(app.current()?, move |c| c.perturb(&b.content)).await
}

#[derive(Deserialize)]
struct Ask {
    agent_id: AgentId,
    question: String,
}

async fn ask(State(app): State<Arc<AppState>>, Json(b): Json<Ask>) -> ApiResult<Json<Emitted>> {
    emitted(app.current()?, move |c| c.ask(&b.agent_id, &b.question)).await
}

async fn memory(
    State(app): State<Arc<AppState>>,
    Path(agent): Path<String>,
) -> ApiResult<Response> {
    let c = app.current()?;
    let s = blocking(move || c.memory(&AgentId::new(agent))).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], s.to_json()).into_response())
}

#[derive(Debug, Deserialize, Serialize)]
struct ScoreEntry {
    #[serde(default)]
    scenario_id: Option<String>,
    run_id: String,
    rater_id: String,
    score: f64,
}

async fn get_scores(State(app): State<Arc<AppState>>) -> ApiResult<Response> {
    let text = match fs::read_to_string(&app.config.scores) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => SCORES_HEADER.join(",") + "\n",
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string())),
    };
    Ok(([(header::CONTENT_TYPE, "text/csv")], text).into_response())
}

const SCORES_HEADER: [&str; 4] = ["scenario_id", "run_id", "rater_id", "score"];

async fn post_score(
    State(app): State<Arc<AppState>>,
    Json(mut b): Json<ScoreEntry>,
) -> ApiResult<(StatusCode, Json<ScoreEntry>)> {
    let invalid = |m: &str| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "range", m);
    if !(b.score.is_finite() && (0.0..=10.0).contains(&b.score)) {
        return Err(invalid(&format!("score {} is outside [0, 10]", b.score)));
    }
    if b.run_id.trim().is_empty() || b.rater_id.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
            "run_id and rater_id are required",
        ));
    }
    let scenario_id = b
        .scenario_id
        .clone()
        .unwrap_or_else(|| app.config.scenario.scenario_id.clone());
    b.scenario_id = Some(scenario_id.clone());
    let io = |e: &dyn std::fmt::Display| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string())
    };
    {
        let _guard = app.scores_lock.lock().expect("scores lock");
        let path = &app.config.scores;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io(&e))?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io(&e))?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(SCORES_HEADER).map_err(|e| io(&e))?;
        }
        w.write_record([
            scenario_id.as_str(),
            b.run_id.as_str(),
            b.rater_id.as_str(),
            &b.score.to_string(),
        ])
        .map_err(|e| io(&e))?;
        w.flush().map_err(|e| io(&e))?;
    }
    Ok((StatusCode::CREATED, Json(b)))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/runs", post(start_run))
        .route("/api/run/state", get(run_state))
        .route("/api/run/events", get(events))
        .route("/api/run/events/stream", get(event_stream))
        .route("/api/run/transcript", get(transcript))
        .route("/api/run/step", post(step))
        .route("/api/run/auto", post(auto))
        .route("/api/run/perturb", post(perturb))
        .route("/api/run/ask", post(ask))
        .route("/api/run/memory/{agent_id}", get(memory))
        .route("/api/scores", get(get_scores).post(post_score))
        .with_state(state)
}

/// A server running on its own runtime thread; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

pub fn start(config: ServerConfig) -> Result<ServerHandle, CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(e.to_string()))?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(&config.addr))
        .map_err(|e| CliError::io(format!("bind {}: {e}", config.addr)))?;
    let addr = listener.local_addr().map_err(|e| CliError::io(e.to_string()))?;
    let app = router(AppState::new(config));
    let (tx, rx) = oneshot::channel::<()>();
    let join = thread::spawn(move || {
        rt.block_on(async move {
            let r = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = r {
                log::error!("server stopped: {e}");
            }
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        join: Some(join),
    })
}

pub fn serve(config: ServerConfig) -> Result<(), CliError> {
    let handle = start(config)?;
    println!("listening on http://{}", handle.addr());
    handle.wait();
    Ok(())
}
