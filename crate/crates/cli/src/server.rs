//! Embedding HTTP service: POST /embed, GET /health, GET /tasks.
//!
//! The model slot starts empty and is filled once the checkpoint finishes
//! loading; until then model-backed endpoints answer 503. Parameters are
//! immutable after load and each request runs its own forward pass, so
//! concurrent requests share nothing mutable.

use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use codevec_core::checkpoint::LoadedCheckpoint;
use codevec_core::model::{EmbedInput, EmbeddingModel};
use codevec_core::prefixes::{prefix_for, Role, TaskType};
use codevec_core::trainer::loss::LossConfig;
use serde::Serialize;
use serde_json::{json, Value};

/// Most texts accepted in one /embed call. Larger batches are rejected, not
/// chunked, to keep per-request memory predictable.
pub const MAX_BATCH: usize = 256;

/// A checkpoint ready to serve.
pub struct ReadyModel {
    pub model: EmbeddingModel<f32>,
    pub loss: LossConfig,
    pub model_id: String,
}

impl From<LoadedCheckpoint> for ReadyModel {
    fn from(ck: LoadedCheckpoint) -> Self {
        Self {
            model: ck.model,
            loss: ck.loss,
            model_id: ck.model_id,
        }
    }
}

/// Shared service state: empty while the checkpoint loads, filled once.
pub struct ServeState {
    slot: OnceLock<ReadyModel>,
}

impl ServeState {
    pub fn loading() -> Arc<Self> {
        Arc::new(Self {
            slot: OnceLock::new(),
        })
    }

    pub fn ready_from(ready: ReadyModel) -> Arc<Self> {
        let state = Self::loading();
        state.fill(ready);
        state
    }

    /// Publish the loaded model. Panics if called twice; the loader runs
    /// once.
    pub fn fill(&self, ready: ReadyModel) {
        if self.slot.set(ready).is_err() {
            panic!("model slot filled twice");
        }
    }

    pub fn ready(&self) -> Option<&ReadyModel> {
        self.slot.get()
    }
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/embed", post(embed))
        .route("/health", get(health))
        .route("/tasks", get(tasks))
        .with_state(state)
}

#[derive(Serialize)]
struct EmbedResponse {
    /// One unit-norm vector per input text, in input order, as decimal JSON
    /// numbers.
    vectors: Vec<Vec<f32>>,
    dimensions: usize,
    model_id: String,
}

fn error_body(status: StatusCode, field: Option<&str>, message: String) -> Response {
    let body = match field {
        Some(f) => json!({ "field": f, "error": message }),
        None => json!({ "error": message }),
    };
    (status, Json(body)).into_response()
}

fn bad_request(field: &str, message: impl Into<String>) -> Response {
    error_body(StatusCode::BAD_REQUEST, Some(field), message.into())
}

fn still_loading() -> Response {
    error_body(
        StatusCode::SERVICE_UNAVAILABLE,
        None,
        "model is still loading".into(),
    )
}

/// Parsed and validated /embed request.
struct EmbedCall {
    texts: Vec<String>,
    task: TaskType,
    role: Role,
    dimensions: Option<usize>,
}

fn parse_embed_request(body: &[u8]) -> Result<EmbedCall, Response> {
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        error_body(
            StatusCode::BAD_REQUEST,
            None,
            format!("request body is not valid JSON: {e}"),
        )
    })?;
    let obj = value.as_object().ok_or_else(|| {
        error_body(
            StatusCode::BAD_REQUEST,
            None,
            "request body must be a JSON object".into(),
        )
    })?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "texts" | "task" | "role" | "dimensions") {
            return Err(bad_request(
                key,
                "unknown field (expected texts, task, role, dimensions)",
            ));
        }
    }

    let texts_value = obj
        .get("texts")
        .ok_or_else(|| bad_request("texts", "missing required field"))?;
    let items = texts_value
        .as_array()
        .ok_or_else(|| bad_request("texts", "must be an array of strings"))?;
    if items.is_empty() {
        return Err(bad_request("texts", "must contain at least one text"));
    }
    if items.len() > MAX_BATCH {
        return Err(error_body(
            StatusCode::PAYLOAD_TOO_LARGE,
            Some("texts"),
            format!("batch limit is {MAX_BATCH} texts per request, got {}", items.len()),
        ));
    }
    let mut texts = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item.as_str() {
            Some(s) => texts.push(s.to_string()),
            None => return Err(bad_request("texts", format!("texts[{i}] must be a string"))),
        }
    }

    let task_label = obj
        .get("task")
        .ok_or_else(|| bad_request("task", "missing required field"))?
        .as_str()
        .ok_or_else(|| bad_request("task", "must be a string"))?;
    let task = TaskType::from_label(task_label).map_err(|e| bad_request("task", e.to_string()))?;

    let role_label = obj
        .get("role")
        .ok_or_else(|| bad_request("role", "missing required field"))?
        .as_str()
        .ok_or_else(|| bad_request("role", "must be a string"))?;
    let role = Role::from_label(role_label).map_err(|e| bad_request("role", e.to_string()))?;

    let dimensions = match obj.get("dimensions") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let n = v
                .as_u64()
                .ok_or_else(|| bad_request("dimensions", "must be a positive integer"))?;
            Some(n as usize)
        }
    };

    Ok(EmbedCall {
        texts,
        task,
        role,
        dimensions,
    })
}

async fn embed(State(state): State<Arc<ServeState>>, body: Bytes) -> Response {
    let call = match parse_embed_request(&body) {
        Ok(call) => call,
        Err(resp) => return resp,
    };
    let Some(ready) = state.ready() else {
        return still_loading();
    };

    let dims = match call.dimensions {
        Some(d) => {
            if !ready.loss.matryoshka_dims.contains(&d) {
                let available = ready
                    .loss
                    .matryoshka_dims
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                return bad_request(
                    "dimensions",
                    format!("{d} is not a served width (available: {available})"),
                );
            }
            d
        }
        None => ready.model.d_model(),
    };

    let shared = state.clone();
    let computed = tokio::task::spawn_blocking(move || {
        let ready = shared.ready().expect("checked above; slot never empties");
        let inputs: Vec<EmbedInput<'_>> = call
            .texts
            .iter()
            .map(|t| EmbedInput {
                task: call.task,
                role: call.role,
                text: t,
            })
            .collect();
        ready.model.embed(&inputs, dims)
    })
    .await;

    match computed {
        Ok(Ok(vectors)) => (
            StatusCode::OK,
            Json(EmbedResponse {
                vectors,
                dimensions: dims,
                model_id: ready.model_id.clone(),
            }),
        )
            .into_response(),
        Ok(Err(e)) => error_body(
            StatusCode::INTERNAL_SERVER_ERROR,
            None,
            format!("embedding failed: {e}"),
        ),
        Err(e) => error_body(
            StatusCode::INTERNAL_SERVER_ERROR,
            None,
            format!("embedding task failed: {e}"),
        ),
    }
}

async fn health(State(state): State<Arc<ServeState>>) -> Response {
    match state.ready() {
        Some(ready) => (
            StatusCode::OK,
            Json(json!({
                "model_id": ready.model_id,
                "pooling": ready.model.pooler.kind().label(),
                "d_model": ready.model.d_model(),
                "dims": ready.loss.matryoshka_dims,
            })),
        )
            .into_response(),
        None => still_loading(),
    }
}

#[derive(Serialize, PartialEq, Debug)]
pub struct TaskEntry {
    pub task: &'static str,
    pub role: &'static str,
    pub prefix: &'static str,
}

/// The ten instruction strings, one per (task, role) pair, in task-major
/// order.
pub fn task_entries() -> Vec<TaskEntry> {
    let mut entries = Vec::with_capacity(10);
    for task in TaskType::ALL {
        for role in Role::ALL {
            entries.push(TaskEntry {
                task: task.label(),
                role: role.label(),
                prefix: prefix_for(task, role),
            });
        }
    }
    entries
}

/// Serves the instruction strings. Static, so available even while the
/// checkpoint is loading.
async fn tasks() -> Response {
    (StatusCode::OK, Json(task_entries())).into_response()
}
