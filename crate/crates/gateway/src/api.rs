use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hilo_core::config::{DatasetSource, FieldError, Mode};
use hilo_core::datamodel::{generate_dataset, load_dataset, DatasetSpec};
use hilo_core::engine::{learner_hash, load_scenes, Control, Engine, EngineEvent};
use hilo_core::{ExperimentConfig, Scene};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;
use crate::experiment::Experiment;

/// Shared server state. Experiments are isolated from each other; each one
/// owns its engine.
pub struct AppState {
    datasets: Mutex<HashMap<String, Arc<Vec<Scene>>>>,
    experiments: Mutex<HashMap<String, Arc<Experiment>>>,
    next_id: AtomicU64,
    /// Seed for requests that do not carry one.
    default_seed: Option<u64>,
}

impl AppState {
    pub fn new(default_seed: Option<u64>) -> Arc<Self> {
        Arc::new(AppState {
            datasets: Mutex::new(HashMap::new()),
            experiments: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            default_seed,
        })
    }

    fn id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn experiment(&self, id: &str) -> Result<Arc<Experiment>, ApiError> {
        self.experiments
            .lock()
            .expect("experiments lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("experiment", id))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", post(create_dataset))
        .route("/experiments", post(create_experiment))
        .route("/experiments/{id}", get(experiment_status))
        .route("/experiments/{id}/metrics", get(metrics))
        .route("/experiments/{id}/events", get(events))
        .route("/experiments/{id}/learner", get(learner))
        .route("/experiments/{id}/annotations/next", get(next_annotation))
        .route("/experiments/{id}/control", post(control))
        .route("/annotations/{task_id}", post(submit_annotation))
        .route("/annotations/{task_id}/dismiss", post(dismiss_annotation))
        .with_state(state)
}

fn parse_json(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))
}

/// Deserializes with the failing field's path, so errors can name it.
fn from_value<T: for<'de> Deserialize<'de>>(v: Value, status: StatusCode) -> Result<T, ApiError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        let message = e.inner().to_string();
        if status == StatusCode::CONFLICT {
            ApiError::invalid_config(vec![FieldError { field, message }])
        } else {
            ApiError::bad_request(message).with_field(field)
        }
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRequest {
    spec: Option<DatasetSpec>,
    seed: Option<u64>,
    path: Option<String>,
}

#[derive(Debug, Serialize)]
struct DatasetCreated {
    dataset_id: String,
    scenes: usize,
    frames: usize,
    objects: usize,
}

async fn create_dataset(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: DatasetRequest = if body.is_empty() {
        DatasetRequest {
            spec: None,
            seed: None,
            path: None,
        }
    } else {
        from_value(parse_json(&body)?, StatusCode::BAD_REQUEST)?
    };
    let scenes = match (req.spec, req.path) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give either `spec` or `path`, not both")),
        (None, Some(path)) => load_dataset(&path).map_err(|e| ApiError::bad_request(e.to_string()).with_field("path"))?,
        (spec, None) => {
            let spec = spec.unwrap_or_default();
            spec.validate()
                .map_err(|e| ApiError::bad_request(e.to_string()).with_field("spec"))?;
            let seed = req.seed.or(st.default_seed).unwrap_or(0);
            generate_dataset(&spec, seed).map_err(|e| ApiError::bad_request(e.to_string()).with_field("spec"))?
        }
    };
    let id = st.id("ds");
    let out = DatasetCreated {
        dataset_id: id.clone(),
        scenes: scenes.len(),
        frames: scenes.iter().map(|s| s.frames.len()).sum(),
        objects: scenes.iter().flat_map(|s| &s.frames).map(|f| f.objects.len()).sum(),
    };
    st.datasets.lock().expect("datasets lock").insert(id, Arc::new(scenes));
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

#[derive(Debug, Serialize)]
struct ExperimentCreated {
    experiment_id: String,
    status: crate::experiment::Status,
    mode: Mode,
    chunks: usize,
}

async fn create_experiment(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let mut raw = if body.is_empty() {
        Value::Object(Default::default())
    } else {
        parse_json(&body)?
    };
    if let (Some(obj), Some(seed)) = (raw.as_object_mut(), st.default_seed) {
        obj.entry("seed").or_insert(seed.into());
    }
    let config: ExperimentConfig = from_value(raw, StatusCode::CONFLICT)?;
    config.validate().map_err(ApiError::invalid_config)?;

    let scenes = match &config.dataset {
        DatasetSource::Id { id } => st
            .datasets
            .lock()
            .expect("datasets lock")
            .get(id)
            .map(|s| s.as_ref().clone())
            .ok_or_else(|| {
                ApiError::invalid_config(vec![FieldError {
                    field: "dataset.id".into(),
                    message: format!("unknown dataset `{id}`"),
                }])
            })?,
        other => load_scenes(other, config.seed).map_err(|e| {
            ApiError::invalid_config(vec![FieldError {
                field: "dataset".into(),
                message: e.to_string(),
            }])
        })?,
    };
    let engine = Engine::new(config, scenes).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let chunks = engine.chunk_count();
    let id = st.id("exp");
    let exp = Arc::new(Experiment::new(id.clone(), engine));
    st.experiments
        .lock()
        .expect("experiments lock")
        .insert(id.clone(), exp.clone());

    match exp.mode {
        Mode::Batch => {
            let runner = exp.clone();
            tokio::task::spawn_blocking(move || runner.run_batch())
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?;
        }
        Mode::Live => {
            tokio::spawn(exp.clone().run_live());
        }
    }
    let out = ExperimentCreated {
        experiment_id: id,
        status: exp.status().status,
        mode: exp.mode,
        chunks,
    };
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn experiment_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.experiment(&id)?.status()).into_response())
}

async fn metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let exp = st.experiment(&id)?;
    let report = tokio::task::spawn_blocking(move || exp.metrics())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(report).into_response())
}

async fn learner(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.experiment(&id)?.learner_status()).into_response())
}

/// Line-delimited JSON: the full history first, then events as they happen,
/// ending when the run does.
async fn events(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let exp = st.experiment(&id)?;
    let stream = futures::stream::unfold((exp, 0usize), |(exp, i)| async move {
        let ev = loop {
            let appended = exp.appended();
            if let Some(ev) = exp.event(i) {
                break ev;
            }
            if exp.is_done() {
                return None;
            }
            appended.await;
        };
        let mut line = serde_json::to_vec(&ev).expect("events serialize");
        line.push(b'\n');
        Some((Ok::<_, Infallible>(Bytes::from(line)), (exp, i + 1)))
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("valid response"))
}

async fn control(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let exp = st.experiment(&id)?;
    let c: Control = from_value(parse_json(&body)?, StatusCode::BAD_REQUEST)?;
    Ok(Json(exp.control(c)?).into_response())
}

/// Task ids on the wire carry their experiment: `<experiment>.<task>`.
fn split_task_id(task_id: &str) -> Result<(&str, u64), ApiError> {
    task_id
        .rsplit_once('.')
        .and_then(|(e, t)| Some((e, t.parse().ok()?)))
        .ok_or_else(|| ApiError::not_found("task", task_id))
}

async fn next_annotation(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let exp = st.experiment(&id)?;
    let mut h = exp.hitl();
    let Some(mut task) = h.queue.next_task() else {
        if h.queue.budget_remaining() == 0 {
            return Err(ApiError::from(hilo_core::hitl::AnnotationError::BudgetExhausted));
        }
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    // Show the current model's opinion, not the one at queue time.
    if let Ok(p) = h.learner.predict(&task.features) {
        task.model_prediction.class_id = p.class_id;
        task.model_prediction.score = p.score();
    }
    let remaining = h.queue.budget_remaining();
    drop(h);
    let mut v = serde_json::to_value(&task).map_err(|e| ApiError::internal(e.to_string()))?;
    v["task_id"] = Value::String(format!("{id}.{}", task.task_id));
    v["experiment_id"] = Value::String(id);
    v["budget_remaining"] = remaining.into();
    Ok(Json(v).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    class_id: usize,
}

#[derive(Debug, Serialize)]
struct LabelAccepted {
    task_id: String,
    class_id: usize,
    update_index: usize,
    budget_remaining: usize,
    finalized: bool,
    learner_hash: String,
}

async fn submit_annotation(
    State(st): State<Arc<AppState>>,
    Path(task_id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let (exp_id, task) = split_task_id(&task_id)?;
    let exp = st.experiment(exp_id)?;
    let req: LabelRequest = from_value(parse_json(&body)?, StatusCode::BAD_REQUEST)?;
    let now = exp.sim_now();
    let (event, hash) = {
        let mut h = exp.hitl();
        let event = h.submit_label(task, req.class_id, now)?;
        (event, learner_hash(&h.learner))
    };
    exp.record(EngineEvent::Training { event: event.clone() });
    Ok(Json(LabelAccepted {
        task_id,
        class_id: event.class_id,
        update_index: event.update_index,
        budget_remaining: event.budget_remaining,
        finalized: event.finalized,
        learner_hash: hash,
    })
    .into_response())
}

async fn dismiss_annotation(State(st): State<Arc<AppState>>, Path(task_id): Path<String>) -> Result<Response, ApiError> {
    let (exp_id, task) = split_task_id(&task_id)?;
    let exp = st.experiment(exp_id)?;
    exp.hitl().queue.dismiss(task)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}
