//! Wire protocol and clients for the neural pipes, deterministic stub
//! adapters, and the prompt and crop glue around them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inference::{valid_confidence, BBox, Detection, FrameCaption, FrameDetections, FrameOcr, FrameTags, OcrSpan, Tag};
use crate::pipeline::{Brancher, BranchingPipe, Pipe, PipeError};
use crate::relations::{caption_sentences, is_pronoun, CorefMap, CorefResolver, RecentSubjectCoref, Triplet};
use crate::segment::Transcript;
use crate::window::{keys, DataWindow, FrameRef, ImageBuffer, InferenceSlot, SlotPayload, WordTiming};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_CROP_PAD: f64 = 0.02;
/// Crops with fewer pixels than this are skipped.
pub const MIN_CROP_AREA: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Transcribe,
    Tag,
    Ground,
    Ocr,
    Caption,
    ParseTriplets,
    Coref,
    /// Reserved for mask-derived box refinement.
    RefineBox,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Transcribe,
        TaskKind::Tag,
        TaskKind::Ground,
        TaskKind::Ocr,
        TaskKind::Caption,
        TaskKind::ParseTriplets,
        TaskKind::Coref,
        TaskKind::RefineBox,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Transcribe => "transcribe",
            TaskKind::Tag => "tag",
            TaskKind::Ground => "ground",
            TaskKind::Ocr => "ocr",
            TaskKind::Caption => "caption",
            TaskKind::ParseTriplets => "parse_triplets",
            TaskKind::Coref => "coref",
            TaskKind::RefineBox => "refine_box",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// The response body a stub returns for content it has no entry for.
    pub fn empty_body(&self) -> Value {
        match self {
            TaskKind::Transcribe => serde_json::json!({ "words": [] }),
            TaskKind::Tag => serde_json::json!({ "tags": [] }),
            TaskKind::Ground => serde_json::json!({ "detections": [] }),
            TaskKind::Ocr => serde_json::json!({ "spans": [] }),
            TaskKind::Caption => serde_json::json!({ "caption": "" }),
            TaskKind::ParseTriplets => serde_json::json!({ "triplets": [] }),
            TaskKind::Coref => serde_json::json!({ "clusters": [] }),
            TaskKind::RefineBox => serde_json::json!({ "boxes": [] }),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("adapter config: {0}")]
    Config(String),
    #[error("{task}: transport error after {attempts} attempts: {message}")]
    Transport { task: TaskKind, attempts: u32, message: String },
    #[error("{task}: timed out after {attempts} attempts")]
    Timeout { task: TaskKind, attempts: u32 },
    #[error("{task}: schema error: {message}")]
    Schema { task: TaskKind, message: String },
    #[error("stub manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(50),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEndpoint {
    pub task: TaskKind,
    pub address: String,
    #[serde(rename = "timeout_ms", with = "millis")]
    pub timeout: Duration,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Send PNG bytes with image references instead of the hash alone.
    #[serde(default)]
    pub inline_images: bool,
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl AdapterEndpoint {
    pub fn new(task: TaskKind, address: impl Into<String>) -> Self {
        Self {
            task,
            address: address.into(),
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            inline_images: false,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.timeout.is_zero() {
            return Err(AdapterError::Config(format!("{}: timeout must be positive", self.task)));
        }
        if self.retry.max_attempts == 0 {
            return Err(AdapterError::Config(format!("{}: max_attempts must be at least 1", self.task)));
        }
        if !(self.retry.multiplier.is_finite() && self.retry.multiplier >= 1.0) {
            return Err(AdapterError::Config(format!("{}: backoff multiplier must be >= 1", self.task)));
        }
        if self.max_in_flight == 0 {
            return Err(AdapterError::Config(format!("{}: max_in_flight must be positive", self.task)));
        }
        Ok(())
    }
}

/// Content-addressed image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub hash: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_base64: Option<String>,
}

impl ImageRef {
    pub fn of(image: &ImageBuffer, inline: bool) -> Result<Self, AdapterError> {
        let png_base64 = if inline {
            let bytes = image.to_png_bytes().map_err(|e| AdapterError::Config(e.to_string()))?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        } else {
            None
        };
        Ok(Self {
            hash: image.content_hash(),
            width: image.width(),
            height: image.height(),
            png_base64,
        })
    }
}

fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// A typed request of one task kind.
pub trait AdapterRequest: Serialize {
    const TASK: TaskKind;
    type Response: AdapterResponse;

    /// Stub lookup key.
    fn content_key(&self) -> String;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

pub trait AdapterResponse: DeserializeOwned + Serialize {
    fn validate(&self) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscribeRequest {
    /// Content hash of the audio track.
    pub audio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWord {
    pub w: String,
    pub s: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscribeResponse {
    pub words: Vec<WireWord>,
}

impl AdapterRequest for TranscribeRequest {
    const TASK: TaskKind = TaskKind::Transcribe;
    type Response = TranscribeResponse;

    fn content_key(&self) -> String {
        self.audio.clone()
    }
}

impl AdapterResponse for TranscribeResponse {
    fn validate(&self) -> Result<(), String> {
        for (i, w) in self.words.iter().enumerate() {
            if !(w.s.is_finite() && w.e.is_finite()) || w.s < 0.0 || w.s > w.e {
                return Err(format!("word {i} has invalid times [{}, {}]", w.s, w.e));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRequest {
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagResponse {
    pub tags: Vec<Tag>,
}

impl AdapterRequest for TagRequest {
    const TASK: TaskKind = TaskKind::Tag;
    type Response = TagResponse;

    fn content_key(&self) -> String {
        self.image.hash.clone()
    }
}

impl AdapterResponse for TagResponse {
    fn validate(&self) -> Result<(), String> {
        for t in &self.tags {
            check_label(&t.label)?;
            check_confidence(t.confidence)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    pub image: ImageRef,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub detections: Vec<Detection>,
}

impl AdapterRequest for GroundRequest {
    const TASK: TaskKind = TaskKind::Ground;
    type Response = GroundResponse;

    /// Phrases are a function of the image under stub tagging, so the image
    /// hash alone addresses the response.
    fn content_key(&self) -> String {
        self.image.hash.clone()
    }

    fn validate(&self) -> Result<(), String> {
        if self.phrases.is_empty() {
            return Err("grounding prompt has no phrases".into());
        }
        Ok(())
    }
}

impl AdapterResponse for GroundResponse {
    fn validate(&self) -> Result<(), String> {
        for d in &self.detections {
            check_label(&d.label)?;
            check_confidence(d.confidence)?;
            d.bbox.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrRequest {
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrResponse {
    pub spans: Vec<OcrSpan>,
}

impl AdapterRequest for OcrRequest {
    const TASK: TaskKind = TaskKind::Ocr;
    type Response = OcrResponse;

    fn content_key(&self) -> String {
        self.image.hash.clone()
    }
}

impl AdapterResponse for OcrResponse {
    fn validate(&self) -> Result<(), String> {
        for s in &self.spans {
            check_label(&s.text)?;
            check_confidence(s.confidence)?;
            if let Some(b) = &s.bbox {
                b.validate().map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

impl AdapterRequest for CaptionRequest {
    const TASK: TaskKind = TaskKind::Caption;
    type Response = CaptionResponse;

    fn content_key(&self) -> String {
        self.image.hash.clone()
    }
}

impl AdapterResponse for CaptionResponse {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseTripletsRequest {
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseTripletsResponse {
    pub triplets: Vec<WireTriplet>,
}

impl AdapterRequest for ParseTripletsRequest {
    const TASK: TaskKind = TaskKind::ParseTriplets;
    type Response = ParseTripletsResponse;

    fn content_key(&self) -> String {
        text_key(&self.sentence)
    }
}

impl AdapterResponse for ParseTripletsResponse {
    fn validate(&self) -> Result<(), String> {
        for t in &self.triplets {
            check_label(&t.subject)?;
            check_label(&t.relation)?;
            check_label(&t.object)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefCluster {
    pub canonical: String,
    pub mentions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefResponse {
    pub clusters: Vec<CorefCluster>,
}

impl AdapterRequest for CorefRequest {
    const TASK: TaskKind = TaskKind::Coref;
    type Response = CorefResponse;

    fn content_key(&self) -> String {
        text_key(&self.text)
    }
}

impl AdapterResponse for CorefResponse {
    fn validate(&self) -> Result<(), String> {
        for c in &self.clusters {
            check_label(&c.canonical)?;
            if is_pronoun(&c.canonical) {
                return Err(format!("cluster canonical {:?} is a pronoun", c.canonical));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineBoxRequest {
    pub image: ImageRef,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineBoxResponse {
    pub boxes: Vec<BBox>,
}

impl AdapterRequest for RefineBoxRequest {
    const TASK: TaskKind = TaskKind::RefineBox;
    type Response = RefineBoxResponse;

    fn content_key(&self) -> String {
        self.image.hash.clone()
    }
}

impl AdapterResponse for RefineBoxResponse {
    fn validate(&self) -> Result<(), String> {
        for b in &self.boxes {
            b.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn check_label(s: &str) -> Result<(), String> {
    if s.trim().is_empty() {
        Err("empty label".into())
    } else {
        Ok(())
    }
}

fn check_confidence(c: f64) -> Result<(), String> {
    if valid_confidence(c) {
        Ok(())
    } else {
        Err(format!("confidence {c} outside [0, 1]"))
    }
}

/// Request document: `{version, task, key, body}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub version: u32,
    pub task: TaskKind,
    pub key: String,
    pub body: Value,
}

/// Response document: `{version, task, body}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    pub version: u32,
    pub task: TaskKind,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("status {0}")]
    Status(u16),
}

/// Moves one request document to an adapter and returns its response text.
pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &AdapterEndpoint, request: &RequestEnvelope) -> Result<String, TransportError>;
}

/// JSON over HTTP: `POST {address}/v1/{task}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn send(&self, endpoint: &AdapterEndpoint, request: &RequestEnvelope) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .build()
            .into();
        let url = format!("{}/v{}/{}", endpoint.address.trim_end_matches('/'), PROTOCOL_VERSION, request.task);
        let body = serde_json::to_string(request).expect("request serializes");
        let result = agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .and_then(|mut resp| resp.body_mut().read_to_string());
        result.map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::StatusCode(code) => TransportError::Status(code),
            other => TransportError::Unreachable(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingEntry {
    /// Unknown content gets the task's empty response.
    #[default]
    Empty,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: TaskKind,
    pub key: String,
    pub response: Value,
}

/// Fixture manifest: `{version, missing, entries: [{task, key, response}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubManifest {
    pub version: u32,
    #[serde(default)]
    pub missing: MissingEntry,
    pub entries: Vec<ManifestEntry>,
}

impl Default for StubManifest {
    fn default() -> Self {
        Self {
            version: PROTOCOL_VERSION,
            missing: MissingEntry::Empty,
            entries: Vec::new(),
        }
    }
}

impl StubManifest {
    pub fn parse(text: &str) -> Result<Self, AdapterError> {
        let m: StubManifest = serde_json::from_str(text).map_err(|e| AdapterError::Manifest(e.to_string()))?;
        if m.version != PROTOCOL_VERSION {
            return Err(AdapterError::Manifest(format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        let text = std::fs::read_to_string(path).map_err(|e| AdapterError::Manifest(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn insert<R: AdapterRequest>(&mut self, key: impl Into<String>, response: &R::Response) {
        self.entries.push(ManifestEntry {
            task: R::TASK,
            key: key.into(),
            response: serde_json::to_value(response).expect("response serializes"),
        });
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("manifest serializes");
        out.push('\n');
        out
    }
}

/// Replays canned responses keyed by `(task, content key)`; a pure function
/// of its inputs.
#[derive(Debug, Clone, Default)]
pub struct StubTransport {
    entries: HashMap<(TaskKind, String), Value>,
    missing: MissingEntry,
}

impl StubTransport {
    pub fn new(manifest: &StubManifest) -> Self {
        let mut entries = HashMap::new();
        for e in &manifest.entries {
            // later entries override earlier ones
            entries.insert((e.task, e.key.clone()), e.response.clone());
        }
        Self {
            entries,
            missing: manifest.missing,
        }
    }

    pub fn lookup(&self, task: TaskKind, key: &str) -> Option<&Value> {
        self.entries.get(&(task, key.to_string()))
    }
}

impl Transport for StubTransport {
    fn send(&self, _endpoint: &AdapterEndpoint, request: &RequestEnvelope) -> Result<String, TransportError> {
        let body = match (self.lookup(request.task, &request.key), self.missing) {
            (Some(v), _) => v.clone(),
            (None, MissingEntry::Empty) => request.task.empty_body(),
            (None, MissingEntry::Error) => {
                return Err(TransportError::Unreachable(format!("no stub entry for {}", request.key)));
            }
        };
        let envelope = ResponseEnvelope {
            version: PROTOCOL_VERSION,
            task: request.task,
            body,
        };
        Ok(serde_json::to_string(&envelope).expect("response serializes"))
    }
}

/// Counting semaphore bounding in-flight requests of one endpoint.
#[derive(Debug)]
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable handle to one endpoint.
#[derive(Clone)]
pub struct AdapterClient {
    endpoint: AdapterEndpoint,
    transport: Arc<dyn Transport>,
    limiter: Arc<Limiter>,
}

impl fmt::Debug for AdapterClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdapterClient").field("endpoint", &self.endpoint).finish()
    }
}

impl AdapterClient {
    pub fn new(endpoint: AdapterEndpoint, transport: Arc<dyn Transport>) -> Result<Self, AdapterError> {
        endpoint.validate()?;
        let limiter = Arc::new(Limiter::new(endpoint.max_in_flight));
        Ok(Self {
            endpoint,
            transport,
            limiter,
        })
    }

    pub fn endpoint(&self) -> &AdapterEndpoint {
        &self.endpoint
    }

    pub fn image_ref(&self, image: &ImageBuffer) -> Result<ImageRef, AdapterError> {
        ImageRef::of(image, self.endpoint.inline_images)
    }

    pub fn call<R: AdapterRequest>(&self, request: &R) -> Result<R::Response, AdapterError> {
        call_adapter(self, request)
    }
}

/// Sends `request`, retrying transport failures per the endpoint's policy,
/// and validates the response before returning it.
pub fn call_adapter<R: AdapterRequest>(client: &AdapterClient, request: &R) -> Result<R::Response, AdapterError> {
    let task = R::TASK;
    let schema = |message: String| AdapterError::Schema { task, message };
    if client.endpoint.task != task {
        return Err(AdapterError::Config(format!(
            "endpoint serves {} but request is {task}",
            client.endpoint.task
        )));
    }
    request.validate().map_err(|m| schema(format!("request: {m}")))?;
    let envelope = RequestEnvelope {
        version: PROTOCOL_VERSION,
        task,
        key: request.content_key(),
        body: serde_json::to_value(request).expect("request serializes"),
    };
    let retry = client.endpoint.retry;
    let text = {
        let _permit = client.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match client.transport.send(&client.endpoint, &envelope) {
                Ok(text) => break text,
                Err(e) if attempt < retry.max_attempts => {
                    log::debug!("{task}: attempt {attempt} failed: {e}");
                    std::thread::sleep(retry.delay(attempt));
                }
                Err(TransportError::Timeout) => return Err(AdapterError::Timeout { task, attempts: attempt }),
                Err(e) => {
                    return Err(AdapterError::Transport {
                        task,
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    };
    let response: ResponseEnvelope = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    if response.version != PROTOCOL_VERSION {
        return Err(schema(format!("unsupported version {}", response.version)));
    }
    if response.task != task {
        return Err(schema(format!("response is for task {}", response.task)));
    }
    let body: R::Response = serde_json::from_value(response.body).map_err(|e| schema(e.to_string()))?;
    body.validate().map_err(schema)?;
    Ok(body)
}

/// Transcribes an audio track into a word-timed transcript.
pub fn transcribe(client: &AdapterClient, video_id: &str, audio_hash: &str) -> Result<Transcript, AdapterError> {
    let resp = client.call(&TranscribeRequest {
        audio: audio_hash.to_string(),
    })?;
    let mut words: Vec<WordTiming> = resp.words.into_iter().map(|w| WordTiming::new(w.w, w.s, w.e)).collect();
    words.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(Transcript {
        video_id: video_id.to_string(),
        words,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingPrompt {
    pub phrases: Vec<String>,
    pub image: FrameRef,
}

fn push_distinct(out: &mut Vec<String>, seen: &mut HashSet<String>, phrase: &str) {
    let p = phrase.split_whitespace().collect::<Vec<_>>().join(" ");
    if !p.is_empty() && seen.insert(p.to_lowercase()) {
        out.push(p);
    }
}

/// Distinct tag labels of `frame`, in first-seen order, optionally followed
/// by its OCR phrases. `None` means the frame falls back to automatic
/// regions and no grounding call is made.
pub fn build_grounding_prompt(window: &DataWindow, frame: &FrameRef, include_ocr: bool) -> Option<GroundingPrompt> {
    let mut phrases = Vec::new();
    let mut seen = HashSet::new();
    if let Some(SlotPayload::Tags(all)) = window.slot(keys::TAGS).map(|s| &s.payload) {
        for ft in all.iter().filter(|ft| ft.frame.same_frame(frame)) {
            for t in &ft.tags {
                push_distinct(&mut phrases, &mut seen, &t.label);
            }
        }
    }
    if phrases.is_empty() {
        return None;
    }
    if include_ocr {
        if let Some(SlotPayload::Ocr(all)) = window.slot(keys::OCR).map(|s| &s.payload) {
            for fo in all.iter().filter(|fo| fo.frame.same_frame(frame)) {
                for s in &fo.spans {
                    push_distinct(&mut phrases, &mut seen, &s.text);
                }
            }
        }
    }
    Some(GroundingPrompt {
        phrases,
        image: frame.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSpec {
    pub source: FrameRef,
    /// Detection box; the whole frame for branch 0.
    pub bbox: BBox,
    /// Padded pixel rectangle `[x0, y0, x1, y1)`.
    pub pixel_rect: [u32; 4],
    pub branch_index: u32,
    pub label: Option<String>,
}

/// Pixel rectangle of `bbox` grown by `pad` (a fraction of each image side)
/// and clamped to the image. `None` when the result holds fewer than
/// [`MIN_CROP_AREA`] pixels.
pub fn crop_rect(bbox: &BBox, width: u32, height: u32, pad: f64) -> Option<[u32; 4]> {
    let eps = 1e-9;
    let (w, h) = (width as f64, height as f64);
    let lo = |v: f64, side: f64| ((v - pad).clamp(0.0, 1.0) * side + eps).floor() as u32;
    let hi = |v: f64, side: f64| ((v + pad).clamp(0.0, 1.0) * side - eps).ceil().max(0.0) as u32;
    let rect = [lo(bbox.x0, w), lo(bbox.y0, h), hi(bbox.x1, w).min(width), hi(bbox.y1, h).min(height)];
    let area = rect[2].saturating_sub(rect[0]) as u64 * rect[3].saturating_sub(rect[1]) as u64;
    (area >= MIN_CROP_AREA).then_some(rect)
}

/// The whole frame as branch 0, then one padded crop per detection.
/// Degenerate crops are skipped and later crops keep consecutive indices.
pub fn focus_crops(
    frame: &FrameRef,
    image: &ImageBuffer,
    detections: &[Detection],
    pad: f64,
) -> Result<Vec<(CropSpec, ImageBuffer)>, AdapterError> {
    let mut out = vec![(
        CropSpec {
            source: frame.clone(),
            bbox: BBox::FULL,
            pixel_rect: [0, 0, image.width(), image.height()],
            branch_index: 0,
            label: None,
        },
        image.clone(),
    )];
    for d in detections {
        d.bbox.validate().map_err(|e| AdapterError::Config(e.to_string()))?;
        let Some(rect) = crop_rect(&d.bbox, image.width(), image.height(), pad) else {
            log::warn!(
                "frame {}: skipping degenerate crop of {:?} at {:?}",
                frame.frame_index,
                d.label,
                <[f64; 4]>::from(d.bbox)
            );
            continue;
        };
        let crop = image
            .crop(rect[0], rect[1], rect[2], rect[3])
            .map_err(|e| AdapterError::Config(e.to_string()))?;
        let branch_index = out.len() as u32;
        out.push((
            CropSpec {
                source: frame.clone(),
                bbox: d.bbox,
                pixel_rect: rect,
                branch_index,
                label: Some(d.label.clone()),
            },
            crop,
        ));
    }
    Ok(out)
}

/// Frame-level caption: whole-frame caption first, then crops by branch
/// index, each ended as a sentence.
pub fn merge_captions(captions: &[FrameCaption]) -> String {
    let mut sorted: Vec<&FrameCaption> = captions.iter().collect();
    sorted.sort_by_key(|c| c.branch_index);
    sorted
        .iter()
        .map(|c| c.text.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t.ends_with(['.', '!', '?']) {
                t.to_string()
            } else {
                format!("{t}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Frames an image pipe works on: the keyframes when selected, else all
/// frames of the window.
pub fn target_frames(window: &DataWindow) -> Result<Vec<(FrameRef, Arc<ImageBuffer>)>, PipeError> {
    let refs: Vec<FrameRef> = match window.slot(keys::KEYFRAMES).map(|s| &s.payload) {
        Some(SlotPayload::Keyframes(sel)) => sel.keyframes.iter().map(|k| k.frame.clone()).collect(),
        _ => window.frames().iter().map(|f| f.frame_ref.clone()).collect(),
    };
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        let frame = window
            .frame(r.frame_index)
            .ok_or_else(|| PipeError::new(format!("keyframe {} not in window", r.frame_index)))?;
        out.push((r, frame.image.load()?));
    }
    Ok(out)
}

fn frame_error(frame: &FrameRef, e: AdapterError) -> PipeError {
    PipeError::new(format!("frame {}: {e}", frame.frame_index))
}

/// The ImageTagging pipe.
#[derive(Debug, Clone)]
pub struct TaggingPipe {
    pub client: AdapterClient,
}

impl Pipe for TaggingPipe {
    fn name(&self) -> &str {
        "tagger"
    }

    fn reads(&self) -> Vec<String> {
        vec![keys::KEYFRAMES.into()]
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::TAGS.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let mut out = Vec::new();
        for (frame, image) in target_frames(&window)? {
            let req = TagRequest {
                image: self.client.image_ref(&image)?,
            };
            let resp = self.client.call(&req).map_err(|e| frame_error(&frame, e))?;
            out.push(FrameTags { frame, tags: resp.tags });
        }
        Ok(window.put_slot(InferenceSlot::new(keys::TAGS, SlotPayload::Tags(out), self.name()))?)
    }
}

/// The OCR pipe.
#[derive(Debug, Clone)]
pub struct OcrPipe {
    pub client: AdapterClient,
}

impl Pipe for OcrPipe {
    fn name(&self) -> &str {
        "ocr"
    }

    fn reads(&self) -> Vec<String> {
        vec![keys::KEYFRAMES.into()]
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::OCR.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let mut out = Vec::new();
        for (frame, image) in target_frames(&window)? {
            let req = OcrRequest {
                image: self.client.image_ref(&image)?,
            };
            let resp = self.client.call(&req).map_err(|e| frame_error(&frame, e))?;
            out.push(FrameOcr { frame, spans: resp.spans });
        }
        Ok(window.put_slot(InferenceSlot::new(keys::OCR, SlotPayload::Ocr(out), self.name()))?)
    }
}

/// Grounding driven by the tag prompt. Frames without tags get no call and
/// are listed in the `grounding_fallback` slot.
#[derive(Debug, Clone)]
pub struct GroundingPipe {
    pub client: AdapterClient,
    pub include_ocr: bool,
}

impl Pipe for GroundingPipe {
    fn name(&self) -> &str {
        "grounding"
    }

    fn reads(&self) -> Vec<String> {
        vec![keys::KEYFRAMES.into(), keys::TAGS.into(), keys::OCR.into()]
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::DETECTIONS.into(), keys::GROUNDING_FALLBACK.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let mut out = Vec::new();
        let mut fallback = Vec::new();
        for (frame, image) in target_frames(&window)? {
            let Some(prompt) = build_grounding_prompt(&window, &frame, self.include_ocr) else {
                fallback.push(frame.frame_index);
                out.push(FrameDetections {
                    frame,
                    detections: vec![],
                });
                continue;
            };
            let req = GroundRequest {
                image: self.client.image_ref(&image)?,
                phrases: prompt.phrases,
            };
            let resp = self.client.call(&req).map_err(|e| frame_error(&frame, e))?;
            out.push(FrameDetections {
                frame,
                detections: resp.detections,
            });
        }
        let window = window.put_slot(InferenceSlot::new(keys::DETECTIONS, SlotPayload::Detections(out), self.name()))?;
        Ok(window.put_slot(InferenceSlot::new(
            keys::GROUNDING_FALLBACK,
            SlotPayload::Value(serde_json::json!(fallback)),
            self.name(),
        ))?)
    }
}

/// One crop headed for the captioner.
#[derive(Debug, Clone)]
pub struct CropUnit {
    pub spec: CropSpec,
    pub image: ImageBuffer,
}

/// Branches each keyframe into the whole frame plus detection crops,
/// captions every branch and merges captions back per frame.
#[derive(Debug, Clone)]
pub struct CaptionBrancher {
    pub client: AdapterClient,
    pub pad: f64,
}

impl Brancher for CaptionBrancher {
    type Unit = CropUnit;
    type Output = FrameCaption;

    fn split(&self, window: &DataWindow) -> Result<Vec<CropUnit>, PipeError> {
        let detections: BTreeMap<u64, &[Detection]> = match window.slot(keys::DETECTIONS).map(|s| &s.payload) {
            Some(SlotPayload::Detections(all)) => {
                all.iter().map(|fd| (fd.frame.frame_index, fd.detections.as_slice())).collect()
            }
            _ => BTreeMap::new(),
        };
        let mut units = Vec::new();
        for (frame, image) in target_frames(window)? {
            let dets = detections.get(&frame.frame_index).copied().unwrap_or(&[]);
            for (spec, image) in focus_crops(&frame, &image, dets, self.pad)? {
                units.push(CropUnit { spec, image });
            }
        }
        Ok(units)
    }

    fn process_unit(&self, unit: CropUnit) -> Result<FrameCaption, PipeError> {
        let req = CaptionRequest {
            image: self.client.image_ref(&unit.image)?,
        };
        let resp = self.client.call(&req).map_err(|e| frame_error(&unit.spec.source, e))?;
        Ok(FrameCaption {
            frame: unit.spec.source,
            branch_index: unit.spec.branch_index,
            text: resp.caption.trim().to_string(),
            crop: (unit.spec.branch_index > 0).then_some(unit.spec.bbox),
        })
    }

    fn merge(&self, window: DataWindow, outputs: Vec<FrameCaption>) -> Result<DataWindow, PipeError> {
        let captions: Vec<FrameCaption> = outputs.into_iter().filter(|c| !c.text.is_empty()).collect();
        Ok(window.put_slot(InferenceSlot::new(keys::CAPTIONS, SlotPayload::Captions(captions), "captioner"))?)
    }
}

/// The crop, caption and caption-merge stages as one branching pipe.
pub fn caption_pipe(client: AdapterClient, pad: f64) -> BranchingPipe<CaptionBrancher> {
    BranchingPipe::new("captioner", &[keys::CAPTIONS], CaptionBrancher { client, pad })
}

/// Adapter-backed dependency parsing of captions into raw triplets.
#[derive(Debug, Clone)]
pub struct TripletParserPipe {
    pub client: AdapterClient,
}

impl Pipe for TripletParserPipe {
    fn name(&self) -> &str {
        "triplet_parser"
    }

    fn reads(&self) -> Vec<String> {
        vec![keys::CAPTIONS.into()]
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::RAW_TRIPLETS.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let mut out = Vec::new();
        if let Some(SlotPayload::Captions(all)) = window.slot(keys::CAPTIONS).map(|s| &s.payload) {
            let mut sorted: Vec<&FrameCaption> = all.iter().collect();
            sorted.sort_by_key(|c| (c.frame.frame_index, c.branch_index));
            for c in sorted {
                for sentence in caption_sentences(&c.text) {
                    let resp = self
                        .client
                        .call(&ParseTripletsRequest { sentence })
                        .map_err(|e| frame_error(&c.frame, e))?;
                    for t in resp.triplets {
                        out.push(Triplet::new(t.subject, t.relation, t.object, c.frame.clone(), c.branch_index));
                    }
                }
            }
        }
        Ok(window.put_slot(InferenceSlot::new(keys::RAW_TRIPLETS, SlotPayload::Triplets(out), self.name()))?)
    }
}

/// Coreference through an adapter. Failures fall back to the
/// recent-subject rule.
#[derive(Debug, Clone)]
pub struct AdapterCoref {
    pub client: AdapterClient,
}

impl CorefResolver for AdapterCoref {
    fn resolve(&self, triplets: &[Triplet]) -> CorefMap {
        let text = triplets
            .iter()
            .map(|t| format!("{} {} {}.", t.subject, t.relation, t.object))
            .collect::<Vec<_>>()
            .join(" ");
        match self.client.call(&CorefRequest { text }) {
            Ok(resp) => {
                let mut map = CorefMap::new();
                for c in &resp.clusters {
                    for m in c.mentions.iter().filter(|m| is_pronoun(m)) {
                        // canonical was checked non-pronoun by validation
                        let _ = map.insert(m, &c.canonical);
                    }
                }
                map
            }
            Err(e) => {
                log::warn!("coref adapter failed, using recent-subject rule: {e}");
                RecentSubjectCoref.resolve(triplets)
            }
        }
    }
}
