//! HTTP edit service: `GET /health`, `GET /classes`, `POST /edit`.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sesame::data::io::{encode_mask_png, encode_rgb_png};
use sesame::data::{EditMode, SemanticsScope};
use tokio::sync::Semaphore;

use crate::edit::{decode_inputs, EditError, Editor};

pub const QUEUE_CAP: usize = 16;
pub const BODY_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    editor: Arc<Mutex<Editor>>,
    queue: Arc<Semaphore>,
    version: Arc<str>,
    classes: Arc<ClassesResponse>,
}

impl AppState {
    pub fn new(editor: Editor) -> Self {
        Self::with_queue_cap(editor, QUEUE_CAP)
    }

    /// `cap` bounds the requests waiting for or holding the model.
    pub fn with_queue_cap(editor: Editor, cap: usize) -> Self {
        let classes = ClassesResponse {
            classes: editor
                .manifest()
                .classes
                .iter()
                .map(|c| ClassEntry { id: c.id, name: c.name.clone(), color: c.color })
                .collect(),
        };
        Self {
            version: editor.version().into(),
            classes: Arc::new(classes),
            editor: Arc::new(Mutex::new(editor)),
            queue: Arc::new(Semaphore::new(cap)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    /// Base64 PNG.
    pub image: String,
    /// Base64 single-channel PNG of class indices, 255 where untouched.
    pub painted_labels: String,
    #[serde(default = "default_mode")]
    pub mode: EditMode,
    /// Defaults to full when the server has a segmenter, bbox otherwise.
    #[serde(default)]
    pub semantics_scope: Option<SemanticsScope>,
}

fn default_mode() -> EditMode {
    EditMode::Freeform
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
    pub mask: String,
    pub latency_ms: f64,
    pub model_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

fn error(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into(), field: field.map(str::to_string) })).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classes", get(classes))
        .route("/edit", post(edit))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse { status: "ok".into(), model_version: state.version.to_string() })
}

async fn classes(State(state): State<AppState>) -> Json<ClassesResponse> {
    Json(state.classes.as_ref().clone())
}

fn decode_field(field: &'static str, text: &str) -> Result<Vec<u8>, Response> {
    B64.decode(text.trim())
        .map_err(|e| error(StatusCode::BAD_REQUEST, Some(field), format!("{field}: invalid base64: {e}")))
}

async fn edit(State(state): State<AppState>, body: Result<Json<EditRequest>, JsonRejection>) -> Response {
    let start = Instant::now();
    let Json(req) = match body {
        Ok(b) => b,
        Err(rej) if rej.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            return error(StatusCode::PAYLOAD_TOO_LARGE, None, rej.body_text())
        }
        Err(rej) => return error(StatusCode::BAD_REQUEST, None, rej.body_text()),
    };
    let image_png = match decode_field("image", &req.image) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let painted_png = match decode_field("painted_labels", &req.painted_labels) {
        Ok(v) => v,
        Err(r) => return r,
    };

    // Holding a permit means "queued or running"; none left means overload.
    let Ok(permit) = state.queue.clone().try_acquire_owned() else {
        return error(StatusCode::TOO_MANY_REQUESTS, None, "edit queue is full");
    };
    let editor = state.editor.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let (image, painted) = decode_inputs(&image_png, &painted_png)?;
        let guard = editor.lock().unwrap_or_else(|p| p.into_inner());
        let out = guard.edit(&image, &painted, req.mode, req.semantics_scope)?;
        drop(guard);
        let png = encode_rgb_png(&out.image)?;
        let mask = encode_mask_png(&out.mask)?;
        Ok::<_, EditError>((png, mask))
    })
    .await;

    match outcome {
        Ok(Ok((png, mask))) => Json(EditResponse {
            image: B64.encode(png),
            mask: B64.encode(mask),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            model_version: state.version.to_string(),
        })
        .into_response(),
        Ok(Err(EditError::Invalid { field, message })) => {
            error(StatusCode::BAD_REQUEST, Some(field), format!("{field}: {message}"))
        }
        Ok(Err(EditError::Internal(e))) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, None, join.to_string()),
    }
}

/// Serves until interrupted.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
