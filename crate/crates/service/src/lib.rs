//! HTTP API over the question-answering pipeline.
//!
//! Every pipeline call runs on the blocking pool; shared state is
//! read-only apart from the dataset store.

pub mod config;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgnlq_core::eval::{ablation_matrix, EvalContext, EvalError, EvalReport, ScoringConfig, Setting};
use kgnlq_core::ner::{EntityMention, LinkedEntity};
use kgnlq_core::qgen::{generate_dataset, Dataset, Manifest, TemplateTable, DEFAULT_SINGLE_HOP, DEFAULT_TWO_HOP};
use kgnlq_core::sqlgen::backend::BackendIdentity;
use kgnlq_core::sqlgen::correct::{Attempt, StopReason};
use kgnlq_core::sqlgen::pipeline::StageTiming;
use kgnlq_core::sqlgen::{AnswerSet, BackendRegistry, NerMode, Pipeline, PipelineConfig, PromptTexts, QAResult};
use kgnlq_core::{EntityIndex, KgDatabase};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use config::{AppConfig, BackendDef, ConfigError};
pub use store::DatasetStore;

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Kg(#[from] kgnlq_core::kg::KgError),
    #[error(transparent)]
    Index(#[from] kgnlq_core::entity_index::IndexError),
    #[error(transparent)]
    Template(#[from] kgnlq_core::qgen::templates::TemplateError),
    #[error("cannot prepare {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("default backend `{0}` is not configured")]
    DefaultBackend(String),
}

struct Inner {
    pipeline: Pipeline,
    backends: BackendRegistry,
    default_backend: String,
    templates: TemplateTable,
    defaults: PipelineConfig,
    scoring: ScoringConfig,
    store: DatasetStore,
    fingerprint: String,
}

/// Immutable server state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn from_config(config: &AppConfig) -> Result<Self, StartupError> {
        let io = |path: &std::path::Path| {
            let path = path.display().to_string();
            move |source| StartupError::Io { path, source }
        };
        let db = KgDatabase::open(&config.db)?;
        let index = EntityIndex::build_or_load(&db, config.index_cache.as_deref())?;
        let texts = match &config.prompts_dir {
            Some(dir) => PromptTexts::load_dir(dir).map_err(io(dir))?,
            None => PromptTexts::default(),
        };
        let templates = match &config.templates {
            Some(path) => TemplateTable::load(path)?,
            None => TemplateTable::default(),
        };
        let backends = config.build_backends(&templates);
        let default_backend = match &config.default_backend {
            Some(name) if backends.get(name).is_none() => {
                return Err(StartupError::DefaultBackend(name.clone()))
            }
            Some(name) => name.clone(),
            None => backends.names().remove(0),
        };
        let store = DatasetStore::open(&config.data_dir).map_err(io(&config.data_dir))?;
        let fingerprint = db.fingerprint()?;
        let pipeline = Pipeline::new(db, index, texts).map_err(|e| match e {
            kgnlq_core::sqlgen::pipeline::PipelineError::Kg(e) => StartupError::Kg(e),
            kgnlq_core::sqlgen::pipeline::PipelineError::Index(e) => StartupError::Index(e),
        })?;
        Ok(AppState {
            inner: Arc::new(Inner {
                pipeline,
                backends,
                default_backend,
                templates,
                defaults: config.defaults.clone(),
                scoring: config.scoring,
                store,
                fingerprint,
            }),
        })
    }

    pub fn db(&self) -> &KgDatabase {
        &self.inner.pipeline.db
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

/// Parses a JSON body; any failure is a 400 with serde's message.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEntity {
    pub surface: String,
    pub node_index: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AskOptions {
    pub ner_mode: Option<NerMode>,
    pub self_correction: Option<bool>,
    pub backend: Option<String>,
    pub max_retries: Option<usize>,
    pub demo_dataset_id: Option<String>,
    pub k_demos: Option<usize>,
    /// Entities for `ner_mode = "oracle"`.
    pub gold_entities: Option<Vec<GoldEntity>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub options: AskOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub question: String,
    pub ner_mode: NerMode,
    pub backend: BackendIdentity,
    pub mentions: Vec<EntityMention>,
    pub templated_question: String,
    pub bindings: Vec<LinkedEntity>,
    pub demonstrations: Vec<String>,
    pub attempts: Vec<Attempt>,
    pub stopped_because: StopReason,
    pub answers: AnswerSet,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

impl From<QAResult> for AskResponse {
    fn from(r: QAResult) -> Self {
        AskResponse {
            question: r.question,
            ner_mode: r.ner_mode,
            backend: r.backend,
            mentions: r.mentions,
            templated_question: r.templated.templated,
            bindings: r.templated.bindings,
            demonstrations: r.demonstrations,
            attempts: r.trace.attempts,
            stopped_because: r.trace.stopped_because,
            answers: r.answers,
            timings: r.timings,
            warnings: r.warnings,
        }
    }
}

impl Inner {
    fn backend_name(&self, requested: Option<&str>) -> Result<String, ApiError> {
        let name = requested.unwrap_or(&self.default_backend);
        if self.backends.get(name).is_none() {
            return Err(ApiError::bad_request(format!(
                "unknown backend `{name}` (available: {})",
                self.backends.names().join(", ")
            )));
        }
        Ok(name.to_string())
    }

    fn dataset(&self, id: &str) -> Result<Dataset, ApiError> {
        self.store
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("no dataset with id `{id}`")))
    }
}

async fn ask(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: AskRequest = parse_body(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question must not be empty"));
    }
    let inner = state.inner.clone();
    let o = req.options;
    let backend = inner.backends.get(&inner.backend_name(o.backend.as_deref())?).unwrap();
    let demos = match &o.demo_dataset_id {
        Some(id) => inner.dataset(id)?.examples,
        None => Vec::new(),
    };
    let mut config = inner.defaults.clone();
    if let Some(mode) = o.ner_mode {
        config.ner = mode;
    }
    if let Some(sc) = o.self_correction {
        config.correction.self_correction = sc;
    }
    if let Some(n) = o.max_retries {
        config.correction.max_retries = n;
    }
    if let Some(k) = o.k_demos {
        config.prompt.k_demos = k;
    }
    let gold: Option<Vec<(String, u64)>> = o
        .gold_entities
        .map(|g| g.into_iter().map(|e| (e.surface, e.node_index)).collect());
    let result = blocking(move || {
        inner
            .pipeline
            .answer_question(&req.question, gold.as_deref(), backend.as_ref(), &demos, &config)
    })
    .await?;
    let status = if result.trace.stopped_because == StopReason::BackendFailure {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    };
    Ok((status, Json(AskResponse::from(result))).into_response())
}

async fn schema(State(state): State<AppState>) -> Json<kgnlq_core::SchemaCatalog> {
    Json(state.inner.pipeline.catalog.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRequest {
    pub n_single: usize,
    pub n_two: usize,
    pub seed: u64,
}

impl Default for GenerateRequest {
    fn default() -> Self {
        GenerateRequest {
            n_single: DEFAULT_SINGLE_HOP,
            n_two: DEFAULT_TWO_HOP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCreated {
    pub id: String,
    pub examples: usize,
    /// True when the graph could not supply the requested counts.
    pub partial: bool,
    pub warnings: Vec<String>,
    pub manifest: Manifest,
}

async fn create_dataset(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: GenerateRequest = if body.is_empty() {
        GenerateRequest::default()
    } else {
        parse_body(&body)?
    };
    let inner = state.inner.clone();
    let dataset = blocking(move || {
        let p = &inner.pipeline;
        let ds = generate_dataset(&p.db, &p.catalog, &inner.templates, req.n_single, req.n_two, req.seed)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let id = inner
            .store
            .put(&ds)
            .map_err(|e| ApiError::internal(format!("cannot store dataset: {e}")))?;
        Ok::<_, ApiError>((id, ds))
    })
    .await??;
    let (id, ds) = dataset;
    let m = &ds.manifest;
    let partial = m.produced_single < m.requested_single || m.produced_two < m.requested_two;
    let status = if partial {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::CREATED
    };
    let body = DatasetCreated {
        id,
        examples: ds.examples.len(),
        partial,
        warnings: m.warnings.clone(),
        manifest: ds.manifest.clone(),
    };
    Ok((status, Json(body)).into_response())
}

async fn get_dataset(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Dataset>, ApiError> {
    let inner = state.inner.clone();
    let ds = blocking(move || inner.dataset(&id)).await??;
    Ok(Json(ds))
}

/// `"full"`, `"no-ner"`, `"no-sc"`, `"no-ner-no-sc"` or an explicit setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SettingSpec {
    Name(String),
    Explicit {
        ner: NerMode,
        self_correction: bool,
        #[serde(default)]
        backend: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub dataset_id: String,
    pub settings: Vec<SettingSpec>,
    /// Backend for settings that do not name one.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub demo_dataset_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub dataset_id: String,
    pub report_file: String,
    pub reports: Vec<EvalReport>,
    /// The aligned text rendering of the table.
    pub table: String,
}

async fn eval(State(state): State<AppState>, body: Bytes) -> Result<Json<EvalResponse>, ApiError> {
    let req: EvalRequest = parse_body(&body)?;
    if req.settings.is_empty() {
        return Err(ApiError::bad_request("at least one setting is required"));
    }
    let inner = state.inner.clone();
    let default_backend = inner.backend_name(req.backend.as_deref())?;
    let settings = req
        .settings
        .iter()
        .map(|s| match s {
            SettingSpec::Name(name) => {
                Setting::from_name(name, &default_backend).map_err(ApiError::bad_request)
            }
            SettingSpec::Explicit {
                ner,
                self_correction,
                backend,
            } => Ok(Setting::new(
                *ner,
                *self_correction,
                inner.backend_name(backend.as_deref().or(Some(&default_backend)))?,
            )),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = inner.dataset(&req.dataset_id)?;
    let demos = match &req.demo_dataset_id {
        Some(id) => inner.dataset(id)?.examples,
        None => Vec::new(),
    };
    let response = blocking(move || {
        let ctx = EvalContext {
            pipeline: &inner.pipeline,
            backends: &inner.backends,
            base: inner.defaults.clone(),
            scoring: inner.scoring,
            demo_pool: &demos,
        };
        let table = ablation_matrix(&dataset, &settings, &ctx).map_err(|e| match e {
            EvalError::DatasetCorruption { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            other => ApiError::bad_request(other.to_string()),
        })?;
        let json = serde_json::to_string_pretty(&table).map_err(|e| ApiError::internal(e.to_string()))?;
        let report_file = inner
            .store
            .put_report(&req.dataset_id, &json)
            .map_err(|e| ApiError::internal(format!("cannot store report: {e}")))?;
        Ok::<_, ApiError>(EvalResponse {
            dataset_id: req.dataset_id,
            report_file,
            table: table.render_text(),
            reports: table.reports,
        })
    })
    .await??;
    Ok(Json(response))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub db_fingerprint: String,
    pub backends: Vec<BackendIdentity>,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        db_fingerprint: state.inner.fingerprint.clone(),
        backends: state.inner.backends.identities(),
    })
}

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    let router = Router::new()
        .route("/api/ask", post(ask))
        .route("/api/schema", get(schema))
        .route("/api/datasets", post(create_dataset))
        .route("/api/datasets/{id}", get(get_dataset))
        .route("/api/eval", post(eval))
        .route("/api/health", get(health))
        .with_state(state);
    if cors_origins.is_empty() {
        return router;
    }
    let origins: Vec<HeaderValue> = cors_origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                None
            }
        })
        .collect();
    router.layer(
        CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([axum::http::header::CONTENT_TYPE]),
    )
}

/// Serves until ctrl-c.
pub async fn serve(config: &AppConfig, addr: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let config = config.clone();
    let (state, config) = tokio::task::spawn_blocking(move || AppState::from_config(&config).map(|s| (s, config))).await??;
    let app = router(state, &config.cors_origins);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
