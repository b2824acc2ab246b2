//! Request-response service over a store: retrieval, frames with overlays
//! and the virtual synset annotation loop.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vidkg_core::inference::{Detection, OcrSpan};
use vidkg_core::kb::CaptionRecord;
use vidkg_core::learning::{
    check_labels, collect_candidates, load_labels, save_labels, train_virtual, Candidate, FeatureExtractor, Job,
    JobRunner, LabelRecord, LearningError, TrainOptions,
};
use vidkg_core::lexicon::{slugify, LexiconDb, LexiconError, SynsetId, VirtualSynset};
use vidkg_core::retrieval::{query_to_graph, retrieve, RankedFrame, RetrievalError};
use vidkg_core::store::{Store, StoreError};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_CANDIDATE_LIMIT: usize = 50;

/// Structured error body `{code, message, context}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub context: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, context: Value) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                context,
            },
        }
    }

    pub fn validation(message: impl Into<String>, context: Value) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message, context)
    }

    pub fn not_found(message: impl Into<String>, context: Value) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", message, context)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, json!({}))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound(what) => Self::not_found(e.to_string(), json!({ "what": what })),
            StoreError::InvalidVideoId(id) => Self::validation(e.to_string(), json!({ "video_id": id })),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<LexiconError> for ApiError {
    fn from(e: LexiconError) -> Self {
        let msg = e.to_string();
        match e {
            LexiconError::ParentVirtual(p) => Self::new(StatusCode::BAD_REQUEST, "parent-virtual", msg, json!({ "parent": p })),
            LexiconError::ParentNotFound(p) => Self::new(StatusCode::NOT_FOUND, "parent-not-found", msg, json!({ "parent": p })),
            LexiconError::DuplicateName(id) => Self::new(StatusCode::CONFLICT, "duplicate-name", msg, json!({ "id": id })),
            LexiconError::InvalidName(n) => Self::new(StatusCode::BAD_REQUEST, "invalid-name", msg, json!({ "name": n })),
            LexiconError::InvalidId(id) => Self::validation(msg, json!({ "id": id })),
            _ => Self::internal(msg),
        }
    }
}

impl From<LearningError> for ApiError {
    fn from(e: LearningError) -> Self {
        let msg = e.to_string();
        match e {
            LearningError::SingleClass { positives, negatives } => Self::new(
                StatusCode::BAD_REQUEST,
                "single-class-input",
                msg,
                json!({ "positives": positives, "negatives": negatives }),
            ),
            LearningError::DimensionMismatch { expected, got } => Self::new(
                StatusCode::BAD_REQUEST,
                "dimension-mismatch",
                msg,
                json!({ "expected": expected, "got": got }),
            ),
            LearningError::ParentUnseen(p) => {
                Self::new(StatusCode::NOT_FOUND, "parent-unseen", msg, json!({ "parent": p.as_str() }))
            }
            LearningError::UnknownVirtual(v) => Self::not_found(msg, json!({ "virtual_synset": v.as_str() })),
            LearningError::JobActive(v) => {
                Self::new(StatusCode::CONFLICT, "job-active", msg, json!({ "virtual_synset": v.as_str() }))
            }
            LearningError::DegenerateCrop(b) => Self::validation(msg, json!({ "box": b })),
            LearningError::Options(_) => Self::validation(msg, json!({})),
            LearningError::Store(s) => s.into(),
            _ => Self::internal(msg),
        }
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let msg = e.to_string();
        match e {
            RetrievalError::NoKnownTerms(q) => Self::new(StatusCode::BAD_REQUEST, "no-known-terms", msg, json!({ "q": q })),
            RetrievalError::FingerprintMismatch { video, .. } => {
                Self::new(StatusCode::CONFLICT, "fingerprint-mismatch", msg, json!({ "video_id": video }))
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct Service {
    pub store: Store,
    pub lexicon: LexiconDb,
    pub jobs: JobRunner,
    pub extractor: Box<dyn FeatureExtractor>,
    pub train_options: TrainOptions,
    /// Source of `created_at` stamps.
    pub clock: Box<dyn Fn() -> String + Send + Sync>,
    /// Serializes registry and label mutations.
    mutate: Mutex<()>,
}

pub type AppState = Arc<Service>;

pub fn now_rfc3339() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

impl Service {
    pub fn new(store: Store, lexicon: LexiconDb, extractor: Box<dyn FeatureExtractor>) -> Self {
        Self {
            store,
            lexicon,
            jobs: JobRunner::new(),
            extractor,
            train_options: TrainOptions::default(),
            clock: Box::new(now_rfc3339),
            mutate: Mutex::new(()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.mutate.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn virtual_synset(&self, id: &str) -> ApiResult<VirtualSynset> {
        let sid = SynsetId::parse(id).map_err(ApiError::from)?;
        self.lexicon
            .virtual_synset(&sid)
            .ok_or_else(|| ApiError::not_found(format!("unknown virtual synset {id}"), json!({ "virtual_synset": id })))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/videos", get(list_videos))
        .route("/query", post(query))
        .route("/frames/{video}/{frame}", get(frame))
        .route("/virtual-synsets", post(create_virtual).get(list_virtual))
        .route("/virtual-synsets/{id}/candidates", get(candidates))
        .route("/virtual-synsets/{id}/labels", post(labels))
        .route("/virtual-synsets/{id}/train", post(train))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(e.to_string())))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}"), json!({})))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub versions: Vec<u32>,
    pub latest: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoList {
    pub videos: Vec<VideoEntry>,
}

async fn list_videos(State(s): State<AppState>) -> ApiResult<Json<VideoList>> {
    blocking(move || {
        let mut videos = Vec::new();
        for video_id in s.store.videos()? {
            let versions = s.store.versions(&video_id)?;
            let latest = *versions.last().expect("listed videos have versions");
            videos.push(VideoEntry {
                video_id,
                versions,
                latest,
            });
        }
        Ok(Json(VideoList { videos }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub q: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitBody {
    pub video_id: String,
    pub version: u32,
    pub score: f64,
    pub specificity: u32,
    pub matched: Vec<String>,
    pub frames: Vec<RankedFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub q: String,
    /// Synsets of the query words.
    pub direct: Vec<String>,
    pub hits: Vec<HitBody>,
}

/// Runs a text query against the latest graph of every stored video.
pub fn run_query(store: &Store, lexicon: &LexiconDb, q: &str, top_k: usize) -> ApiResult<QueryResponse> {
    if top_k == 0 {
        return Err(ApiError::validation("top_k must be positive", json!({ "top_k": top_k })));
    }
    let qg = query_to_graph(q, lexicon)?;
    let graphs = store.latest_graphs(Some(lexicon))?;
    let hits = retrieve(&qg, graphs.iter().map(|(_, g)| g), top_k)
        .into_iter()
        .map(|h| HitBody {
            version: graphs.iter().find(|(_, g)| g.video_id == h.video_id).map_or(0, |(v, _)| *v),
            video_id: h.video_id,
            score: h.score,
            specificity: h.specificity,
            matched: h.matched.iter().map(|m| m.to_string()).collect(),
            frames: h.frames,
        })
        .collect();
    Ok(QueryResponse {
        q: q.to_string(),
        direct: qg.direct.keys().map(|d| d.to_string()).collect(),
        hits,
    })
}

async fn query(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<QueryResponse>> {
    let req: QueryRequest = parse_json(&body)?;
    blocking(move || run_query(&s.store, &s.lexicon, &req.q, req.top_k.unwrap_or(DEFAULT_TOP_K)).map(Json)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlays {
    pub detections: Vec<Detection>,
    pub captions: Vec<CaptionRecord>,
    pub ocr: Vec<OcrSpan>,
    /// Synsets of the latest graph with evidence in this frame.
    pub synsets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBody {
    pub video_id: String,
    pub frame_index: u64,
    pub window: Option<u32>,
    pub t: Option<f64>,
    pub width: u32,
    pub height: u32,
    pub content_type: String,
    pub image_base64: String,
    pub overlays: Overlays,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct FrameQuery {
    /// `png` returns the raw image bytes.
    #[serde(default)]
    pub format: Option<String>,
}

async fn frame(
    State(s): State<AppState>,
    Path((video, frame)): Path<(String, u64)>,
    Query(fq): Query<FrameQuery>,
) -> ApiResult<Response> {
    blocking(move || {
        let image = s.store.load_frame(&video, frame)?;
        let png = image.to_png_bytes().map_err(|e| ApiError::internal(e.to_string()))?;
        if fq.format.as_deref() == Some("png") {
            return Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response());
        }
        let kb = s.store.load_kb(&video)?;
        let found = kb
            .windows
            .iter()
            .flat_map(|w| w.keyframes.iter().map(move |f| (w.index, f)))
            .find(|(_, f)| f.frame_index == frame);
        let synsets = match s.store.load_latest(&video, Some(&s.lexicon))? {
            Some((_, g)) => g
                .nodes
                .values()
                .filter(|n| n.evidence.keys().any(|k| k.frame == frame))
                .map(|n| n.id.to_string())
                .collect(),
            None => Vec::new(),
        };
        let body = FrameBody {
            video_id: video.clone(),
            frame_index: frame,
            window: found.map(|(w, _)| w),
            t: found.map(|(_, f)| f.t),
            width: image.width(),
            height: image.height(),
            content_type: "image/png".into(),
            image_base64: base64::engine::general_purpose::STANDARD.encode(png),
            overlays: Overlays {
                detections: found.map(|(_, f)| f.detections.clone()).unwrap_or_default(),
                captions: found.map(|(_, f)| f.captions.clone()).unwrap_or_default(),
                ocr: found.map(|(_, f)| f.ocr.clone()).unwrap_or_default(),
                synsets,
            },
        };
        Ok(Json(body).into_response())
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateVirtual {
    pub parent: String,
    pub name: String,
}

async fn create_virtual(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<VirtualSynset>)> {
    let req: CreateVirtual = parse_json(&body)?;
    blocking(move || {
        let parent = SynsetId::parse(&req.parent)?;
        let _guard = s.lock();
        let created_at = (s.clock)();
        let classifier_ref = format!("clf-{}", slugify(&req.name));
        let v = s.lexicon.register_virtual(&parent, &req.name, &classifier_ref, &created_at)?;
        Ok((StatusCode::CREATED, Json(v)))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualList {
    pub virtual_synsets: Vec<VirtualSynset>,
}

async fn list_virtual(State(s): State<AppState>) -> Json<VirtualList> {
    Json(VirtualList {
        virtual_synsets: s.lexicon.virtual_synsets(),
    })
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CandidateQuery {
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub virtual_synset: String,
    pub parent: String,
    pub candidates: Vec<Candidate>,
}

async fn candidates(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(cq): Query<CandidateQuery>,
) -> ApiResult<Json<CandidateList>> {
    blocking(move || {
        let v = s.virtual_synset(&id)?;
        let limit = cq.limit.unwrap_or(DEFAULT_CANDIDATE_LIMIT);
        let candidates = collect_candidates(&v.parent, &s.store, &s.lexicon, limit)?;
        Ok(Json(CandidateList {
            virtual_synset: v.id.to_string(),
            parent: v.parent.to_string(),
            candidates,
        }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsRequest {
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsResponse {
    /// Labels taken from this request.
    pub accepted: usize,
    /// Labels stored for the virtual synset.
    pub total: usize,
}

async fn labels(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<LabelsResponse>> {
    let req: LabelsRequest = parse_json(&body)?;
    blocking(move || {
        let v = s.virtual_synset(&id)?;
        for (i, r) in req.labels.iter().enumerate() {
            let c = &r.candidate;
            r.candidate
                .bbox
                .validate()
                .map_err(|e| ApiError::validation(e.to_string(), json!({ "index": i })))?;
            if !s.store.frame_path(&c.video_id, c.frame_index)?.exists() {
                return Err(ApiError::not_found(
                    format!("frame {} of {} is not stored", c.frame_index, c.video_id),
                    json!({ "index": i, "video_id": c.video_id, "frame_index": c.frame_index }),
                ));
            }
        }
        let _guard = s.lock();
        let total = save_labels(&s.store, &v.id, &req.labels)?;
        Ok(Json(LabelsResponse {
            accepted: req.labels.len(),
            total,
        }))
    })
    .await
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub job_id: String,
}

async fn train(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<TrainResponse>)> {
    let req: TrainRequest = if body.is_empty() { TrainRequest::default() } else { parse_json(&body)? };
    blocking(move || {
        let v = s.virtual_synset(&id)?;
        let mut options = s.train_options;
        if let Some(l) = req.lambda {
            options.lambda = l;
        }
        if let Some(t) = req.threshold {
            options.threshold = t;
        }
        options.validate()?;
        let _guard = s.lock();
        check_labels(&load_labels(&s.store, &v.id)?)?;
        let state = s.clone();
        let vid = v.id.clone();
        let job_id = s.jobs.submit(v.id.clone(), move |handle| {
            train_virtual(&vid, &state.store, &state.lexicon, state.extractor.as_ref(), &options, |p| {
                handle.set_progress(p)
            })
            .map_err(|e| e.to_string())
        })?;
        Ok((StatusCode::ACCEPTED, Json(TrainResponse { job_id })))
    })
    .await
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}"), json!({ "job_id": id })))
}
