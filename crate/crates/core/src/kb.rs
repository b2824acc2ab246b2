//! The video knowledge base: a frame-indexed document of every inference made
//! on a video's keyframes, written by the window consumer and read back by
//! graph construction.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inference::{valid_confidence, BBox, Detection, OcrSpan, Tag};
use crate::window::{keys, DataWindow, FrameRef, SlotPayload, TranscriptSegment};

pub const KB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("window {got} arrived, expected window {expected}")]
    OutOfOrderWindow { expected: u32, got: u32 },
    #[error("window {0} has no keyframes slot")]
    MissingKeyframes(u32),
    #[error("window {window} belongs to video {got}, not {expected}")]
    WrongVideo { expected: String, got: String, window: u32 },
    #[error("schema version {found} is not supported (expected {KB_VERSION})")]
    SchemaVersion { found: String },
    #[error("window {window}, frame {frame:?}: {message}")]
    Validation {
        window: u32,
        frame: Option<u64>,
        message: String,
    },
    #[error("malformed knowledge base: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub text: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    #[serde(rename = "crop", default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub caption_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub t: f64,
    pub ocr: Vec<OcrSpan>,
    pub tags: Vec<Tag>,
    pub detections: Vec<Detection>,
    pub captions: Vec<CaptionRecord>,
    pub triplets: Vec<TripletRecord>,
}

impl FrameRecord {
    pub fn empty(frame_index: u64, t: f64) -> Self {
        Self {
            frame_index,
            t,
            ocr: vec![],
            tags: vec![],
            detections: vec![],
            captions: vec![],
            triplets: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: u32,
    pub transcript: TranscriptRecord,
    pub keyframes: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoKnowledgeBase {
    pub version: u32,
    pub video_id: String,
    pub fingerprint: String,
    pub created_at: String,
    pub windows: Vec<WindowRecord>,
}

impl VideoKnowledgeBase {
    pub fn new(video_id: impl Into<String>, fingerprint: impl Into<String>, created_at: impl Into<String>) -> Self {
        Self {
            version: KB_VERSION,
            video_id: video_id.into(),
            fingerprint: fingerprint.into(),
            created_at: created_at.into(),
            windows: vec![],
        }
    }

    pub fn frame_ref(&self, window: &WindowRecord, frame: &FrameRecord) -> FrameRef {
        FrameRef::new(self.video_id.clone(), window.index, frame.frame_index, frame.t)
    }

    /// Checks every schema invariant.
    pub fn validate(&self) -> Result<(), KbError> {
        if self.version != KB_VERSION {
            return Err(KbError::SchemaVersion {
                found: self.version.to_string(),
            });
        }
        if self.video_id.is_empty() {
            return Err(KbError::Malformed("empty video_id".into()));
        }
        let mut last_frame: Option<u64> = None;
        for (i, w) in self.windows.iter().enumerate() {
            let fail = |frame: Option<u64>, message: String| KbError::Validation {
                window: w.index,
                frame,
                message,
            };
            if w.index as usize != i {
                return Err(fail(None, format!("window index {} at position {i}; indices must be contiguous from 0", w.index)));
            }
            let tr = &w.transcript;
            if !(tr.start.is_finite() && tr.end.is_finite() && 0.0 <= tr.start && tr.start <= tr.end) {
                return Err(fail(None, format!("transcript span [{}, {}] is invalid", tr.start, tr.end)));
            }
            for f in &w.keyframes {
                let bad = |m: String| fail(Some(f.frame_index), m);
                if last_frame.is_some_and(|l| f.frame_index <= l) {
                    return Err(bad("frame indices must strictly increase".into()));
                }
                last_frame = Some(f.frame_index);
                if !(f.t.is_finite() && tr.start <= f.t && f.t <= tr.end) {
                    return Err(bad(format!("timestamp {} outside window span [{}, {}]", f.t, tr.start, tr.end)));
                }
                for s in &f.ocr {
                    if let Some(b) = &s.bbox {
                        b.validate().map_err(|e| bad(format!("ocr: {e}")))?;
                    }
                    if !valid_confidence(s.confidence) {
                        return Err(bad(format!("ocr confidence {} outside [0, 1]", s.confidence)));
                    }
                }
                for t in &f.tags {
                    if t.label.trim().is_empty() {
                        return Err(bad("empty tag label".into()));
                    }
                    if !valid_confidence(t.confidence) {
                        return Err(bad(format!("tag confidence {} outside [0, 1]", t.confidence)));
                    }
                }
                for d in &f.detections {
                    d.bbox.validate().map_err(|e| bad(format!("detection {:?}: {e}", d.label)))?;
                    if !valid_confidence(d.confidence) {
                        return Err(bad(format!("detection confidence {} outside [0, 1]", d.confidence)));
                    }
                }
                for c in &f.captions {
                    if let Some(b) = &c.crop {
                        b.validate().map_err(|e| bad(format!("caption crop: {e}")))?;
                    }
                }
                for t in &f.triplets {
                    if t.subject.trim().is_empty() || t.object.trim().is_empty() || t.relation.trim().is_empty() {
                        return Err(bad("triplet with an empty term".into()));
                    }
                    if t.caption_index as usize >= f.captions.len().max(1) {
                        return Err(bad(format!("triplet caption_index {} has no caption", t.caption_index)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; field order is fixed by the types.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("knowledge base serializes");
        s.push('\n');
        s
    }
}

/// Hash of the stage names and configuration text that produced a KB.
pub fn pipeline_fingerprint(stages: &[&str], config: &str) -> String {
    let mut h = Sha256::new();
    for s in stages {
        h.update(s.as_bytes());
        h.update(b"\n");
    }
    h.update(b"--\n");
    h.update(config.as_bytes());
    hex::encode(h.finalize())
}

pub fn parse_kb(text: &str) -> Result<VideoKnowledgeBase, KbError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| KbError::Malformed(e.to_string()))?;
    match value.get("version") {
        Some(v) if v.as_u64() == Some(KB_VERSION as u64) => {}
        Some(v) => return Err(KbError::SchemaVersion { found: v.to_string() }),
        None => return Err(KbError::Malformed("missing version".into())),
    }
    let kb: VideoKnowledgeBase = serde_json::from_value(value).map_err(|e| KbError::Malformed(e.to_string()))?;
    kb.validate()?;
    Ok(kb)
}

pub fn load_kb(path: &Path) -> Result<VideoKnowledgeBase, KbError> {
    parse_kb(&std::fs::read_to_string(path)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_kb(kb: &VideoKnowledgeBase, path: &Path) -> Result<(), KbError> {
    kb.validate()?;
    write_atomic(path, kb.to_json().as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), KbError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| KbError::Io(e.error))?;
    Ok(())
}

fn transcript_record(t: &TranscriptSegment) -> TranscriptRecord {
    TranscriptRecord {
        text: t.text.clone(),
        start: t.start,
        end: t.end,
    }
}

/// Turns processed windows, in order, into a knowledge base.
pub struct KbConsumer {
    kb: VideoKnowledgeBase,
}

impl KbConsumer {
    pub fn new(video_id: impl Into<String>, fingerprint: impl Into<String>, created_at: impl Into<String>) -> Self {
        Self {
            kb: VideoKnowledgeBase::new(video_id, fingerprint, created_at),
        }
    }

    fn next_index(&self) -> u32 {
        self.kb.windows.len() as u32
    }

    fn check_order(&self, video_id: &str, index: u32) -> Result<(), KbError> {
        if video_id != self.kb.video_id {
            return Err(KbError::WrongVideo {
                expected: self.kb.video_id.clone(),
                got: video_id.to_string(),
                window: index,
            });
        }
        if index != self.next_index() {
            return Err(KbError::OutOfOrderWindow {
                expected: self.next_index(),
                got: index,
            });
        }
        Ok(())
    }

    pub fn consume(&mut self, window: &DataWindow) -> Result<(), KbError> {
        self.check_order(window.video_id(), window.index())?;
        let selection = match window.slot(keys::KEYFRAMES).map(|s| &s.payload) {
            Some(SlotPayload::Keyframes(sel)) => sel,
            _ => return Err(KbError::MissingKeyframes(window.index())),
        };
        let mut keyframes = Vec::new();
        for kf in &selection.keyframes {
            let fr = &kf.frame;
            let mut rec = FrameRecord::empty(fr.frame_index, fr.timestamp);
            if let Some(SlotPayload::Tags(all)) = window.slot(keys::TAGS).map(|s| &s.payload) {
                for t in all.iter().filter(|t| t.frame.same_frame(fr)) {
                    rec.tags.extend(t.tags.iter().cloned());
                }
            }
            if let Some(SlotPayload::Ocr(all)) = window.slot(keys::OCR).map(|s| &s.payload) {
                for o in all.iter().filter(|o| o.frame.same_frame(fr)) {
                    rec.ocr.extend(o.spans.iter().cloned());
                }
            }
            if let Some(SlotPayload::Detections(all)) = window.slot(keys::DETECTIONS).map(|s| &s.payload) {
                for d in all.iter().filter(|d| d.frame.same_frame(fr)) {
                    rec.detections.extend(d.detections.iter().cloned());
                }
            }
            let mut branch_pos = Vec::new();
            if let Some(SlotPayload::Captions(all)) = window.slot(keys::CAPTIONS).map(|s| &s.payload) {
                let mut caps: Vec<_> = all.iter().filter(|c| c.frame.same_frame(fr)).collect();
                caps.sort_by_key(|c| c.branch_index);
                for c in caps {
                    branch_pos.push(c.branch_index);
                    rec.captions.push(CaptionRecord {
                        text: c.text.clone(),
                        crop: c.crop,
                    });
                }
            }
            if let Some(SlotPayload::Triplets(all)) = window.slot(keys::TRIPLETS).map(|s| &s.payload) {
                for t in all.iter().filter(|t| t.frame.same_frame(fr)) {
                    let caption_index = branch_pos.iter().position(|b| *b == t.caption_index).unwrap_or(0) as u32;
                    rec.triplets.push(TripletRecord {
                        subject: t.subject.clone(),
                        relation: t.relation.clone(),
                        object: t.object.clone(),
                        caption_index,
                    });
                }
            }
            keyframes.push(rec);
        }
        let record = WindowRecord {
            index: window.index(),
            transcript: transcript_record(window.transcript()),
            keyframes,
        };
        self.kb.windows.push(record);
        Ok(())
    }

    /// Records a window that failed in the pipeline so indices stay
    /// contiguous; it carries its transcript but no keyframes.
    pub fn skip(&mut self, video_id: &str, index: u32, transcript: &TranscriptSegment) -> Result<(), KbError> {
        self.check_order(video_id, index)?;
        self.kb.windows.push(WindowRecord {
            index,
            transcript: transcript_record(transcript),
            keyframes: vec![],
        });
        Ok(())
    }

    pub fn finish(self) -> Result<VideoKnowledgeBase, KbError> {
        self.kb.validate()?;
        Ok(self.kb)
    }
}
