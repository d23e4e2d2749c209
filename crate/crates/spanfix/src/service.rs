//! HTTP API for human review: tasks over explained samples, Likert ratings
//! and post-edits.
//!
//! Persistence is a single append-only JSONL log. The in-memory index is
//! rebuilt from it at startup, and every write goes through one lock so log
//! lines never interleave.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanfix_core::analytics::{Dimension, Level, Rating};
use spanfix_core::markup::serialize_marked;
use spanfix_core::model::{ErrorSpan, Sample};
use spanfix_core::run::PipelineRun;
use thiserror::Error;
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

/// A sample as shown to raters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleView {
    pub sample_id: String,
    pub lp: String,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub translation: String,
    pub marked_translation: String,
    pub spans: Vec<ErrorSpan>,
    pub explanations: Vec<ExplanationView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction: Option<String>,
    pub span_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplanationView {
    pub index: u32,
    pub text: String,
}

/// Immutable run store the service was started with.
#[derive(Debug, Default)]
pub struct RunStore {
    samples: BTreeMap<String, SampleView>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} has no matching sample in the dataset")]
    UnknownSample(String),
    #[error("run {id}: {message}")]
    BadRun { id: String, message: String },
    #[error("store log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("store log: {0}")]
    Io(#[from] std::io::Error),
}

impl RunStore {
    /// Joins successful runs with their samples. Failed runs are skipped.
    pub fn from_runs(runs: &[PipelineRun], samples: &[Sample]) -> Result<Self, StoreError> {
        let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut out = BTreeMap::new();
        for run in runs.iter().filter(|r| r.report.is_some()) {
            let sample = by_id
                .get(run.sample_id.as_str())
                .ok_or_else(|| StoreError::UnknownSample(run.sample_id.clone()))?;
            let spans = run.spans().to_vec();
            let marked = serialize_marked(&run.translation, &spans).map_err(|e| StoreError::BadRun {
                id: run.sample_id.clone(),
                message: e.to_string(),
            })?;
            let report = run.report.as_ref().expect("filtered on report");
            out.insert(
                run.sample_id.clone(),
                SampleView {
                    sample_id: run.sample_id.clone(),
                    lp: sample.lp.to_string(),
                    source: sample.source.clone(),
                    reference: sample.reference.clone(),
                    translation: run.translation.clone(),
                    marked_translation: marked.into_string(),
                    spans,
                    explanations: report
                        .explanations
                        .iter()
                        .map(|(&index, text)| ExplanationView {
                            index,
                            text: text.clone(),
                        })
                        .collect(),
                    correction: report.correction.clone(),
                    span_source: run.detection.as_ref().map(|d| d.source_tag.clone()).unwrap_or_default(),
                },
            );
        }
        Ok(Self { samples: out })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFilter {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub sample_ids: Vec<String>,
    pub dimensions: Vec<Dimension>,
    pub seed: u64,
    pub filter: TaskFilter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingEntry {
    pub task_id: String,
    #[serde(flatten)]
    pub rating: Rating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostEdit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    pub rater_id: String,
    pub sample_id: String,
    pub text: String,
}

/// One line of the store log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Task(Task),
    Rating(RatingEntry),
    Postedit(PostEdit),
}

type RatingKey = (String, String, Level, Option<u32>, Dimension);

fn rating_key(r: &Rating) -> RatingKey {
    (
        r.rater_id.clone(),
        r.sample_id.clone(),
        r.level,
        r.span_index,
        r.dimension,
    )
}

/// One rating slot a rater must fill for a sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Requirement {
    pub level: Level,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_index: Option<u32>,
    pub dimension: Dimension,
}

fn requirements(dimensions: &[Dimension], n_spans: usize) -> Vec<Requirement> {
    let mut out = Vec::new();
    for &dimension in dimensions {
        if dimension == Dimension::Relatedness {
            for i in 1..=n_spans as u32 {
                out.push(Requirement {
                    level: Level::Explanation,
                    span_index: Some(i),
                    dimension,
                });
            }
        }
        out.push(Requirement {
            level: Level::Document,
            span_index: None,
            dimension,
        });
    }
    out
}

#[derive(Default)]
struct Index {
    records: Vec<LogRecord>,
    tasks: BTreeMap<String, Task>,
    ratings: HashSet<RatingKey>,
}

impl Index {
    fn apply(&mut self, record: LogRecord) {
        match &record {
            LogRecord::Task(t) => {
                self.tasks.insert(t.task_id.clone(), t.clone());
            }
            LogRecord::Rating(r) => {
                self.ratings.insert(rating_key(&r.rating));
            }
            LogRecord::Postedit(_) => {}
        }
        self.records.push(record);
    }

    fn missing(&self, rater: &str, sample_id: &str, reqs: &[Requirement]) -> Vec<Requirement> {
        reqs.iter()
            .filter(|q| {
                !self.ratings.contains(&(
                    rater.to_string(),
                    sample_id.to_string(),
                    q.level,
                    q.span_index,
                    q.dimension,
                ))
            })
            .cloned()
            .collect()
    }
}

struct Store {
    file: File,
    index: Index,
}

impl Store {
    fn append(&mut self, record: LogRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(&record)?;
        writeln!(self.file, "{line}")?;
        self.file.sync_data()?;
        self.index.apply(record);
        Ok(())
    }
}

pub struct AppState {
    runs: RunStore,
    store: RwLock<Store>,
}

impl AppState {
    /// Opens (or creates) the log at `log_path` and replays it.
    pub fn open(runs: RunStore, log_path: &Path) -> Result<Self, StoreError> {
        let mut index = Index::default();
        if log_path.exists() {
            let reader = BufReader::new(File::open(log_path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LogRecord = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                index.apply(record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(Self {
            runs,
            store: RwLock::new(Store { file, index }),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize)]
pub struct TaskSummary {
    #[serde(flatten)]
    pub task: Task,
    /// Completed samples per rater.
    pub progress: BTreeMap<String, usize>,
}

async fn list_tasks(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let store = state.store.read().await;
    let mut raters: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for record in &store.index.records {
        if let LogRecord::Rating(r) = record {
            raters
                .entry(r.task_id.as_str())
                .or_default()
                .insert(r.rating.rater_id.as_str());
        }
    }
    let tasks: Vec<TaskSummary> = store
        .index
        .tasks
        .values()
        .map(|task| {
            let progress = raters
                .get(task.task_id.as_str())
                .into_iter()
                .flatten()
                .map(|rater| {
                    let done = task
                        .sample_ids
                        .iter()
                        .filter(|sid| {
                            let n = state.runs.samples.get(*sid).map_or(0, |s| s.spans.len());
                            store
                                .index
                                .missing(rater, sid, &requirements(&task.dimensions, n))
                                .is_empty()
                        })
                        .count();
                    (rater.to_string(), done)
                })
                .collect();
            TaskSummary {
                task: task.clone(),
                progress,
            }
        })
        .collect();
    Json(serde_json::json!({ "tasks": tasks }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateTask {
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub filter: TaskFilter,
    #[serde(default)]
    pub dimensions: Option<Vec<Dimension>>,
}

/// Seeded uniform sampling without replacement over the filtered sample ids.
pub fn sample_task_ids(candidates: &[String], count: usize, seed: u64) -> Vec<String> {
    let mut ids = candidates.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = ids.partial_shuffle(&mut rng, count);
    chosen.to_vec()
}

async fn create_task(State(state): State<Arc<AppState>>, Json(req): Json<CreateTask>) -> ApiResult<Json<Task>> {
    let candidates: Vec<String> = state
        .runs
        .samples
        .values()
        .filter(|s| req.filter.lp.as_ref().is_none_or(|lp| &s.lp == lp))
        .filter(|s| req.filter.span_source.as_ref().is_none_or(|t| &s.span_source == t))
        .map(|s| s.sample_id.clone())
        .collect();
    if req.count == 0 || req.count > candidates.len() {
        return Err(ApiError::invalid(format!(
            "count must be in 1..={} for this filter, got {}",
            candidates.len(),
            req.count
        )));
    }
    let dimensions = req.dimensions.unwrap_or_else(|| vec![Dimension::Relatedness]);
    if dimensions.is_empty() {
        return Err(ApiError::invalid("dimensions must not be empty"));
    }
    let mut store = state.store.write().await;
    let task = Task {
        task_id: format!("t{}", store.index.tasks.len() + 1),
        sample_ids: sample_task_ids(&candidates, req.count, req.seed),
        dimensions,
        seed: req.seed,
        filter: req.filter,
    };
    store
        .append(LogRecord::Task(task.clone()))
        .map_err(ApiError::internal)?;
    Ok(Json(task))
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub rater: String,
}

#[derive(Debug, Serialize)]
pub struct NextResponse {
    pub task_id: String,
    pub done: bool,
    pub position: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleView>,
    pub required: Vec<Requirement>,
}

async fn next_sample(
    State(state): State<Arc<AppState>>,
    UrlPath(task_id): UrlPath<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<Json<NextResponse>> {
    let store = state.store.read().await;
    let task = store
        .index
        .tasks
        .get(&task_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown task {task_id}")))?;
    for (position, sid) in task.sample_ids.iter().enumerate() {
        let sample = state
            .runs
            .samples
            .get(sid)
            .ok_or_else(|| ApiError::not_found(format!("unknown sample {sid}")))?;
        let missing = store
            .index
            .missing(&q.rater, sid, &requirements(&task.dimensions, sample.spans.len()));
        if !missing.is_empty() {
            return Ok(Json(NextResponse {
                task_id: task_id.clone(),
                done: false,
                position,
                total: task.sample_ids.len(),
                sample: Some(sample.clone()),
                required: missing,
            }));
        }
    }
    Ok(Json(NextResponse {
        task_id: task_id.clone(),
        done: true,
        position: task.sample_ids.len(),
        total: task.sample_ids.len(),
        sample: None,
        required: Vec::new(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct RatingRequest {
    pub task_id: String,
    pub rater_id: String,
    pub sample_id: String,
    pub level: Level,
    #[serde(default)]
    pub span_index: Option<u32>,
    pub dimension: Dimension,
    /// Signed so out-of-range values reach validation instead of failing
    /// deserialization.
    pub value: i64,
    #[serde(default)]
    pub overwrite: bool,
}

async fn post_rating(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RatingRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let value = u8::try_from(req.value)
        .ok()
        .filter(|v| *v <= spanfix_core::analytics::LIKERT_MAX)
        .ok_or_else(|| ApiError::invalid(format!("value {} outside 0..=6", req.value)))?;
    let rating = Rating {
        rater_id: req.rater_id,
        sample_id: req.sample_id,
        level: req.level,
        span_index: req.span_index,
        dimension: req.dimension,
        value,
    };
    rating.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    let mut store = state.store.write().await;
    let task = store
        .index
        .tasks
        .get(&req.task_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown task {}", req.task_id)))?;
    if !task.sample_ids.contains(&rating.sample_id) {
        return Err(ApiError::not_found(format!(
            "sample {} is not part of task {}",
            rating.sample_id, req.task_id
        )));
    }
    if !task.dimensions.contains(&rating.dimension) {
        return Err(ApiError::invalid(format!(
            "task {} does not collect {}",
            req.task_id, rating.dimension
        )));
    }
    let sample = state
        .runs
        .samples
        .get(&rating.sample_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample {}", rating.sample_id)))?;
    if let Some(i) = rating.span_index {
        if i as usize > sample.spans.len() {
            return Err(ApiError::invalid(format!(
                "span_index {i} exceeds the {} span(s) of sample {}",
                sample.spans.len(),
                rating.sample_id
            )));
        }
        if rating.dimension != Dimension::Relatedness {
            return Err(ApiError::invalid("helpfulness is rated at document level only"));
        }
    }
    if store.index.ratings.contains(&rating_key(&rating)) && !req.overwrite {
        return Err(ApiError::new(StatusCode::CONFLICT, "rating already recorded"));
    }
    store
        .append(LogRecord::Rating(RatingEntry {
            task_id: req.task_id,
            rating,
        }))
        .map_err(ApiError::internal)?;
    Ok(Json(serde_json::json!({ "status": "ok" })))
}

async fn post_postedit(
    State(state): State<Arc<AppState>>,
    Json(edit): Json<PostEdit>,
) -> ApiResult<Json<serde_json::Value>> {
    if !state.runs.samples.contains_key(&edit.sample_id) {
        return Err(ApiError::not_found(format!("unknown sample {}", edit.sample_id)));
    }
    let mut store = state.store.write().await;
    if let Some(task_id) = &edit.task_id {
        if !store.index.tasks.contains_key(task_id) {
            return Err(ApiError::not_found(format!("unknown task {task_id}")));
        }
    }
    store.append(LogRecord::Postedit(edit)).map_err(ApiError::internal)?;
    Ok(Json(serde_json::json!({ "status": "ok" })))
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    pub task: String,
}

async fn export(State(state): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let store = state.store.read().await;
    if !store.index.tasks.contains_key(&q.task) {
        return Err(ApiError::not_found(format!("unknown task {}", q.task)));
    }
    let mut body = String::new();
    for record in &store.index.records {
        let belongs = match record {
            LogRecord::Rating(r) => r.task_id == q.task,
            LogRecord::Postedit(p) => p.task_id.as_deref() == Some(q.task.as_str()),
            LogRecord::Task(_) => false,
        };
        if belongs {
            body.push_str(&serde_json::to_string(record).map_err(ApiError::internal)?);
            body.push('\n');
        }
    }
    Ok(([(axum::http::header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/api/tasks", get(list_tasks).post(create_task))
        .route("/api/tasks/{id}/next", get(next_sample))
        .route("/api/ratings", post(post_rating))
        .route("/api/postedits", post(post_postedit))
        .route("/api/export", get(export))
        .layer(cors)
        .with_state(state)
}
