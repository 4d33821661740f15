//! HTTP service behind the annotation workbench.
//!
//! Reads are answered from an immutable snapshot. Mutations run one at a
//! time on a blocking thread, persist to disk, and only then publish the new
//! snapshot and respond.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use vidal_core::active_loop::{IngestOutcome, LoopState, QueryRecord};
use vidal_core::formats::{persist_state, DetectionsDocument, ScoresReport, ANNOTATIONS_SCHEMA};
use vidal_core::model::{BBox, FrameDetections, GroundTruthFrame, GroundTruthObject, VideoMeta};
use vidal_core::strategy::StrategyConfig;
use vidal_core::Error;

use crate::session::{self, BoxedSource};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "webp", "bmp"];

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: LoopState,
    pub predictions: BTreeMap<usize, FrameDetections>,
    pub scores: Option<ScoresReport>,
}

struct Writer {
    source: Option<BoxedSource>,
}

pub struct Service {
    state_path: PathBuf,
    images: PathBuf,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<Writer>,
}

impl Service {
    /// Loads the state file and its sidecars. Without a detection source
    /// `POST /api/iterate` answers 503.
    pub fn open(state_path: &Path, images: &Path, source: Option<BoxedSource>) -> vidal_core::Result<Self> {
        let state = vidal_core::formats::load_state(state_path)?;
        let k = state.meta().num_classes();
        let snapshot = Snapshot {
            predictions: session::load_predictions(state_path, k)?,
            scores: session::load_scores(state_path)?,
            state,
        };
        Ok(Service {
            state_path: state_path.to_path_buf(),
            images: images.to_path_buf(),
            snapshot: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(Writer { source }),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    fn publish(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(snapshot);
    }

    fn submit(&self, frame: usize, body: &[u8]) -> Result<SubmitResponse, ApiError> {
        let _writer = self.writer.lock().expect("writer lock poisoned");
        let current = self.snapshot();
        let labels = parse_submission(frame, body, current.state.meta())?;
        let mut state = current.state.clone();
        let outcome = state.ingest_annotations(&[labels])?;
        persist_state(&state, &self.state_path)?;
        let can_iterate = outcome.iteration_complete && !state.is_stopped();
        self.publish(Snapshot {
            state,
            predictions: current.predictions.clone(),
            scores: current.scores.clone(),
        });
        Ok(SubmitResponse { outcome, can_iterate })
    }

    fn iterate(&self) -> Result<ScoresReport, ApiError> {
        let mut writer = self.writer.lock().expect("writer lock poisoned");
        let Some(source) = writer.source.as_mut() else {
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "no detection adapter configured",
            ));
        };
        let mut state = self.snapshot().state.clone();
        let products = session::iterate(&mut state, source.as_mut(), Some(&self.state_path))?;
        session::save_iteration(&state, &self.state_path, &products)?;
        self.publish(Snapshot {
            state,
            predictions: products.predictions,
            scores: Some(products.report.clone()),
        });
        Ok(products.report)
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/queue", get(get_queue))
        .route("/api/history", get(get_history))
        .route("/api/frames/{index}/image", get(get_image))
        .route("/api/frames/{index}/predictions", get(get_predictions))
        .route("/api/frames/{index}/annotations", post(post_annotations))
        .route("/api/iterate", post(post_iterate))
        .with_state(service)
}

#[derive(Debug, Clone, Serialize)]
pub struct StateView {
    pub meta: VideoMeta,
    pub strategy: StrategyConfig,
    pub iteration: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub pending: Vec<usize>,
    pub stop_target: usize,
    pub stopped: bool,
    pub can_iterate: bool,
}

impl StateView {
    fn of(state: &LoopState) -> Self {
        StateView {
            meta: state.meta().clone(),
            strategy: *state.strategy(),
            iteration: state.iteration(),
            labeled: state.labeled().iter().copied().collect(),
            unlabeled: state.unlabeled().iter().copied().collect(),
            test: state.test().iter().copied().collect(),
            pending: state.pending().iter().copied().collect(),
            stop_target: state.stop_target(),
            stopped: state.is_stopped(),
            can_iterate: can_iterate(state),
        }
    }
}

fn can_iterate(state: &LoopState) -> bool {
    state.pending().is_empty() && !state.is_stopped()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueueItem {
    pub frame_index: usize,
    pub thumbnail: String,
    pub status: QueueStatus,
    pub frame_score: Option<f64>,
    pub weighted_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueueView {
    pub iteration: usize,
    pub items: Vec<QueueItem>,
    pub pending: usize,
    pub can_iterate: bool,
}

impl QueueView {
    /// The latest queried batch, pending first, then by weighted score descending.
    fn of(snapshot: &Snapshot) -> Self {
        let state = &snapshot.state;
        let frame_scores: BTreeMap<usize, f64> = snapshot
            .scores
            .iter()
            .flat_map(|r| r.frames.iter().map(|f| (f.index, f.frame_score)))
            .collect();
        let mut items: Vec<QueueItem> = state
            .history()
            .last()
            .map(|record| {
                record
                    .frames
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| QueueItem {
                        frame_index: i,
                        thumbnail: format!("/api/frames/{i}/image"),
                        status: if state.pending().contains(&i) {
                            QueueStatus::Pending
                        } else {
                            QueueStatus::Done
                        },
                        frame_score: frame_scores.get(&i).copied(),
                        weighted_score: record.weighted_scores.get(j).copied(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        items.sort_by(|a, b| {
            (b.status == QueueStatus::Pending)
                .cmp(&(a.status == QueueStatus::Pending))
                .then(
                    b.weighted_score
                        .unwrap_or(0.0)
                        .total_cmp(&a.weighted_score.unwrap_or(0.0)),
                )
                .then(a.frame_index.cmp(&b.frame_index))
        });
        QueueView {
            iteration: state.iteration(),
            pending: state.pending().len(),
            can_iterate: can_iterate(state),
            items,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryView {
    pub iterations: Vec<QueryRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubmitResponse {
    #[serde(flatten)]
    pub outcome: IngestOutcome,
    pub can_iterate: bool,
}

async fn get_state(State(service): State<Arc<Service>>) -> Json<StateView> {
    Json(StateView::of(&service.snapshot().state))
}

async fn get_queue(State(service): State<Arc<Service>>) -> Json<QueueView> {
    Json(QueueView::of(&service.snapshot()))
}

async fn get_history(State(service): State<Arc<Service>>) -> Json<HistoryView> {
    Json(HistoryView {
        iterations: service.snapshot().state.history().to_vec(),
    })
}

async fn get_predictions(
    State(service): State<Arc<Service>>,
    UrlPath(index): UrlPath<usize>,
) -> Result<Json<DetectionsDocument>, ApiError> {
    let snapshot = service.snapshot();
    snapshot.state.meta().check_frame(index)?;
    let frame = snapshot
        .predictions
        .get(&index)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no predictions for frame {index}")))?;
    let iteration = snapshot.scores.as_ref().map_or(0, |s| s.iteration);
    Ok(Json(DetectionsDocument::from_frames(iteration, [frame])))
}

async fn get_image(
    State(service): State<Arc<Service>>,
    UrlPath(index): UrlPath<usize>,
) -> Result<Response, ApiError> {
    service.snapshot().state.meta().check_frame(index)?;
    let Some(path) = find_image(&service.images, index) else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no image for frame {index}"),
        ));
    };
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::from(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/bmp",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Looks for `<i>.<ext>` and zero-padded `<i:04..06>.<ext>` in `dir`.
pub fn find_image(dir: &Path, index: usize) -> Option<PathBuf> {
    let stems = [
        index.to_string(),
        format!("{index:04}"),
        format!("{index:05}"),
        format!("{index:06}"),
    ];
    stems
        .iter()
        .flat_map(|s| IMAGE_EXTENSIONS.iter().map(move |e| dir.join(format!("{s}.{e}"))))
        .find(|p| p.is_file())
}

async fn post_annotations(
    State(service): State<Arc<Service>>,
    UrlPath(index): UrlPath<usize>,
    body: Bytes,
) -> Result<Json<SubmitResponse>, ApiError> {
    let result = tokio::task::spawn_blocking(move || service.submit(index, &body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    result.map(Json)
}

async fn post_iterate(State(service): State<Arc<Service>>) -> Result<Json<ScoresReport>, ApiError> {
    let result = tokio::task::spawn_blocking(move || service.iterate())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    result.map(Json)
}

/// Validates an annotations document for one frame and lists every bad field.
pub fn parse_submission(frame: usize, body: &[u8], meta: &VideoMeta) -> Result<GroundTruthFrame, ApiError> {
    meta.check_frame(frame)?;
    let doc: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::invalid(format!("malformed JSON: {e}"), vec![]))?;
    let mut fields = Vec::new();
    if doc.get("schema").and_then(Value::as_str) != Some(ANNOTATIONS_SCHEMA) {
        fields.push("schema".to_string());
    }
    let frames = match doc.get("frames").and_then(Value::as_array) {
        Some(f) if f.len() == 1 => f,
        _ => {
            fields.push("frames".to_string());
            return Err(ApiError::invalid("expected exactly one frame", fields));
        }
    };
    let record = &frames[0];
    if record.get("index").and_then(Value::as_u64) != Some(frame as u64) {
        fields.push("frames[0].index".to_string());
    }
    let mut objects = Vec::new();
    match record.get("objects").and_then(Value::as_array) {
        None => fields.push("frames[0].objects".to_string()),
        Some(list) => {
            for (j, obj) in list.iter().enumerate() {
                let at = |f: &str| format!("frames[0].objects[{j}].{f}");
                let bbox = obj
                    .get("bbox")
                    .and_then(|b| serde_json::from_value::<[f64; 4]>(b.clone()).ok())
                    .and_then(|b| BBox::try_from(b).ok());
                let class = obj
                    .get("class")
                    .and_then(Value::as_u64)
                    .map(|c| c as usize)
                    .filter(|&c| c < meta.num_classes());
                if bbox.is_none() {
                    fields.push(at("bbox"));
                }
                if class.is_none() {
                    fields.push(at("class"));
                }
                if let Some(o) = obj.as_object() {
                    fields.extend(o.keys().filter(|k| *k != "bbox" && *k != "class").map(|k| at(k)));
                }
                if let (Some(bbox), Some(class)) = (bbox, class) {
                    objects.push(GroundTruthObject { bbox, class });
                }
            }
        }
    }
    if !fields.is_empty() {
        return Err(ApiError::invalid("invalid annotation", fields));
    }
    Ok(GroundTruthFrame {
        frame_index: frame,
        objects,
    })
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub fields: Vec<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn invalid(message: impl Into<String>, fields: Vec<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            fields,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotPending(_)
            | Error::DuplicateAnnotation(_)
            | Error::BatchPending { .. }
            | Error::Stopped { .. } => StatusCode::CONFLICT,
            Error::FrameOutOfRange { .. } => StatusCode::NOT_FOUND,
            Error::InvalidBox(_)
            | Error::InvalidDistribution(_)
            | Error::Schema { .. }
            | Error::Json { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Adapter { .. } | Error::MissingDetections { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

pub async fn serve(service: Arc<Service>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}
