//! HTTP API for interactive ghost-query sessions: query, inspect, then refine
//! with a negative prompt or an inversion edit.

pub mod error;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use gdr_core::denoiser::DenoiserModel;
use gdr_core::diffusion::NoiseSchedule;
use gdr_core::latentdata::{Corpus, Labels, Split};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::ServiceError;
pub use session::{replay, CondSpec, Engine, HistoryEntry, LoadedCorpus, SessionSnapshot, SessionState, StepResult};

/// What to do when a new session would exceed the cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eviction {
    /// Drop the least recently used idle session.
    Lru,
    /// Refuse with 429.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub session_cap: usize,
    pub eviction: Eviction,
    pub default_seed: u64,
    pub default_w: f64,
    pub default_n_q: usize,
    pub default_k: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_cap: 64,
            eviction: Eviction::Lru,
            default_seed: 0,
            default_w: 1.0,
            default_n_q: 5,
            default_k: 10,
        }
    }
}

struct Session {
    id: String,
    corpus: String,
    model: String,
    seed: u64,
    created_ms: u64,
    updated_ms: u64,
    state: SessionState,
}

impl Session {
    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            id: self.id.clone(),
            corpus: self.corpus.clone(),
            model: self.model.clone(),
            seed: self.seed,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            history: self.state.history.clone(),
            last_results: self.state.last_results.clone(),
            n_latents: self.state.current_latents.len(),
        }
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

#[derive(Default)]
struct SessionTable {
    entries: HashMap<String, (u64, SessionHandle)>,
    clock: u64,
}

impl SessionTable {
    fn insert(&mut self, cap: usize, eviction: Eviction, session: Session) -> Result<(), ServiceError> {
        if self.entries.len() >= cap {
            if eviction == Eviction::Reject {
                return Err(ServiceError::TooManySessions(cap));
            }
            // only sessions nobody is holding can go
            let victim = self
                .entries
                .iter()
                .filter(|(_, (_, h))| Arc::strong_count(h) == 1)
                .min_by_key(|(_, (used, _))| *used)
                .map(|(id, _)| id.clone());
            match victim {
                Some(id) => {
                    self.entries.remove(&id);
                }
                None => return Err(ServiceError::TooManySessions(cap)),
            }
        }
        self.clock += 1;
        self.entries.insert(
            session.id.clone(),
            (self.clock, Arc::new(tokio::sync::Mutex::new(session))),
        );
        Ok(())
    }

    fn get(&mut self, id: &str) -> Option<SessionHandle> {
        self.clock += 1;
        let clock = self.clock;
        self.entries.get_mut(id).map(|(used, h)| {
            *used = clock;
            h.clone()
        })
    }
}

/// Models, corpora and the session table. Models and corpora are fixed once
/// serving starts.
pub struct AppState {
    models: BTreeMap<String, Arc<DenoiserModel>>,
    corpora: BTreeMap<String, Arc<LoadedCorpus>>,
    sched: NoiseSchedule,
    config: ServiceConfig,
    sessions: Mutex<SessionTable>,
}

impl AppState {
    pub fn new(config: ServiceConfig, sched: NoiseSchedule) -> Self {
        Self {
            models: BTreeMap::new(),
            corpora: BTreeMap::new(),
            sched,
            config,
            sessions: Mutex::new(SessionTable::default()),
        }
    }

    pub fn add_model(&mut self, name: impl Into<String>, model: DenoiserModel) {
        self.models.insert(name.into(), Arc::new(model));
    }

    pub fn add_corpus(&mut self, name: impl Into<String>, corpus: Corpus) -> gdr_core::Result<()> {
        self.corpora.insert(name.into(), Arc::new(LoadedCorpus::new(corpus)?));
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/corpus/items", get(corpus_items))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", post(query))
        .route("/sessions/{id}/refine/negative", post(refine_negative))
        .route("/sessions/{id}/refine/invert", post(refine_invert))
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::Unprocessable(e.body_text()))
}

async fn health(State(state): State<SharedState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "models": state.models.keys().collect::<Vec<_>>(),
        "corpora": state.corpora.keys().collect::<Vec<_>>(),
        "schedule": state.sched.digest(),
    }))
}

#[derive(Debug, Deserialize)]
struct ItemsQuery {
    corpus: Option<String>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ItemSummary<'a> {
    id: &'a str,
    labels: &'a Labels,
    split: Split,
}

async fn corpus_items(
    State(state): State<SharedState>,
    Query(q): Query<ItemsQuery>,
) -> Result<Json<Value>, ServiceError> {
    let (name, loaded) = match &q.corpus {
        Some(name) => state
            .corpora
            .get_key_value(name)
            .ok_or_else(|| ServiceError::NotFound(format!("no corpus {name}")))?,
        None => state
            .corpora
            .iter()
            .next()
            .ok_or_else(|| ServiceError::NotFound("no corpus loaded".into()))?,
    };
    let limit = q.limit.unwrap_or(50).min(1000);
    let items: Vec<ItemSummary> = loaded
        .corpus
        .items()
        .iter()
        .skip(q.offset)
        .take(limit)
        .map(|it| ItemSummary {
            id: &it.id,
            labels: &it.labels,
            split: it.split,
        })
        .collect();
    Ok(Json(json!({
        "corpus": name,
        "total": loaded.corpus.len(),
        "offset": q.offset,
        "limit": limit,
        "items": items,
    })))
}

#[derive(Debug, Deserialize)]
struct CreateBody {
    corpus: String,
    model: String,
    seed: Option<u64>,
}

async fn create_session(
    State(state): State<SharedState>,
    payload: Result<Json<CreateBody>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ServiceError> {
    let b = body(payload)?;
    let model = state
        .models
        .get(&b.model)
        .ok_or_else(|| ServiceError::NotFound(format!("no model {}", b.model)))?;
    let loaded = state
        .corpora
        .get(&b.corpus)
        .ok_or_else(|| ServiceError::NotFound(format!("no corpus {}", b.corpus)))?;
    let dims = model.dims();
    if dims.d_a != loaded.corpus.d_a() || dims.d_t != loaded.corpus.d_t() {
        return Err(ServiceError::Unprocessable(format!(
            "model {} ({}x{}) does not match corpus {} ({}x{})",
            b.model,
            dims.d_a,
            dims.d_t,
            b.corpus,
            loaded.corpus.d_a(),
            loaded.corpus.d_t()
        )));
    }
    let id = format!("{:016x}", rand::random::<u64>());
    let now = now_ms();
    let seed = b.seed.unwrap_or(state.config.default_seed);
    let session = Session {
        id: id.clone(),
        corpus: b.corpus,
        model: b.model,
        seed,
        created_ms: now,
        updated_ms: now,
        state: SessionState::default(),
    };
    state.sessions.lock().expect("session table poisoned").insert(
        state.config.session_cap,
        state.config.eviction,
        session,
    )?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "seed": seed }))))
}

async fn get_session(
    State(state): State<SharedState>,
    Path(id): Path<String>,
) -> Result<Json<SessionSnapshot>, ServiceError> {
    let handle = state.session(&id)?;
    let session = handle.lock().await;
    Ok(Json(session.snapshot()))
}

/// Runs one step on the session's own (serialized) lock, off the async runtime.
async fn run_step(
    state: SharedState,
    id: String,
    make: impl FnOnce(&Session) -> HistoryEntry + Send + 'static,
) -> Result<Json<StepResult>, ServiceError> {
    let handle = state.session(&id)?;
    let mut session = handle.lock_owned().await;
    tokio::task::spawn_blocking(move || {
        let model = state
            .models
            .get(&session.model)
            .expect("session model is loaded")
            .clone();
        let loaded = state
            .corpora
            .get(&session.corpus)
            .expect("session corpus is loaded")
            .clone();
        let engine = Engine {
            model: &model,
            loaded: &loaded,
            sched: &state.sched,
        };
        let entry = make(&session);
        let out = session.state.apply(&engine, entry)?;
        session.updated_ms = now_ms();
        Ok(Json(out))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct QueryBody {
    cond: CondSpec,
    w: Option<f64>,
    n_q: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
}

async fn query(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    payload: Result<Json<QueryBody>, JsonRejection>,
) -> Result<Json<StepResult>, ServiceError> {
    let b = body(payload)?;
    let cfg = state.config.clone();
    run_step(state, id, move |s| HistoryEntry::Query {
        cond: b.cond,
        w: b.w.unwrap_or(cfg.default_w),
        n_q: b.n_q.unwrap_or(cfg.default_n_q),
        k: b.k.unwrap_or(cfg.default_k),
        seed: b.seed.unwrap_or(s.seed),
    })
    .await
}

#[derive(Debug, Deserialize)]
struct NegativeBody {
    #[serde(default)]
    neg_cond: Option<CondSpec>,
    w: Option<f64>,
}

async fn refine_negative(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    payload: Result<Json<NegativeBody>, JsonRejection>,
) -> Result<Json<StepResult>, ServiceError> {
    let b = body(payload)?;
    let default_w = state.config.default_w;
    run_step(state, id, move |s| HistoryEntry::Negative {
        neg_cond: b.neg_cond,
        w: b.w.or(s.state.last_w()).unwrap_or(default_w),
        seed: s.seed,
    })
    .await
}

#[derive(Debug, Deserialize)]
struct InvertBody {
    new_cond: CondSpec,
    k_steps: Option<usize>,
    w: Option<f64>,
}

async fn refine_invert(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    payload: Result<Json<InvertBody>, JsonRejection>,
) -> Result<Json<StepResult>, ServiceError> {
    let b = body(payload)?;
    let default_w = state.config.default_w;
    run_step(state, id, move |s| HistoryEntry::Invert {
        new_cond: b.new_cond,
        k_steps: b.k_steps.unwrap_or(session::DEFAULT_INVERT_STEPS),
        w: b.w.or(s.state.last_w()).unwrap_or(default_w),
        retention: None,
    })
    .await
}
