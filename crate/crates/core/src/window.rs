//! The `DataWindow`: a time-aligned segment of a video carrying frames, a
//! transcript slice and an open-ended map of named inference slots.
//!
//! Windows are values. `put_slot` consumes a window and hands back the next
//! version, so a window can be moved between pipeline stages without any
//! shared interior mutability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inference::{FrameCaption, FrameDetections, FrameOcr, FrameTags};
use crate::keyframe::KeyframeSelection;
use crate::relations::Triplet;

/// Well-known slot keys written by the standard pipes.
pub mod keys {
    pub const KEYFRAMES: &str = "keyframes";
    pub const TAGS: &str = "tags";
    pub const OCR: &str = "ocr";
    pub const DETECTIONS: &str = "detections";
    pub const CAPTIONS: &str = "captions";
    pub const RAW_TRIPLETS: &str = "raw_triplets";
    pub const TRIPLETS: &str = "triplets";
    pub const GROUNDING_FALLBACK: &str = "grounding_fallback";
    pub const LOOP: &str = "loop";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("window {0} has neither frames nor transcript")]
    EmptyWindow(String),
    #[error("frames of window {window} are not ordered at frame {frame_index}")]
    UnorderedFrames { window: String, frame_index: u64 },
    #[error("frame {frame_index} of video {video_id} does not belong to window {window}")]
    ForeignFrameRef {
        window: String,
        video_id: String,
        frame_index: u64,
    },
    #[error("frame {frame_index} at t={timestamp} lies outside the transcript span of window {window}")]
    FrameOutsideTranscript {
        window: String,
        frame_index: u64,
        timestamp: f64,
    },
    #[error("slot {key} on window {window} is owned by {owner}, not {producer}")]
    KeyCollision {
        window: String,
        key: String,
        owner: String,
        producer: String,
    },
    #[error("invalid timestamp {0}")]
    InvalidTimestamp(f64),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height}x{channels} do not match {len} bytes")]
    BadDimensions {
        width: u32,
        height: u32,
        channels: u8,
        len: usize,
    },
    #[error("unsupported channel count {0}")]
    Channels(u8),
    #[error("zero-area image")]
    ZeroArea,
    #[error("frame image is not available")]
    Missing,
    #[error("decoding {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("encoding image: {0}")]
    Encode(#[from] image::ImageError),
}

/// Stable identity of one frame of a source video.
///
/// `frame_index` is global to the video, not local to the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub window_index: u32,
    pub frame_index: u64,
    pub timestamp: f64,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, window_index: u32, frame_index: u64, timestamp: f64) -> Self {
        Self {
            video_id: video_id.into(),
            window_index,
            frame_index,
            timestamp,
        }
    }

    /// Frames are the same frame when video and frame index agree.
    pub fn same_frame(&self, other: &FrameRef) -> bool {
        self.video_id == other.video_id && self.frame_index == other.frame_index
    }
}

impl PartialEq for FrameRef {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FrameRef {}

impl PartialOrd for FrameRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FrameRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then(self.frame_index.cmp(&other.frame_index))
            .then(self.window_index.cmp(&other.window_index))
            .then(self.timestamp.total_cmp(&other.timestamp))
    }
}

impl Hash for FrameRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.video_id.hash(state);
        self.frame_index.hash(state);
        self.window_index.hash(state);
        self.timestamp.to_bits().hash(state);
    }
}

/// Decoded pixels, row-major, 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroArea);
        }
        if pixels.len() != width as usize * height as usize * channels as usize {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        Self::new(width, height, 1, pixels)
    }

    pub fn rgb(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        Self::new(width, height, 3, pixels)
    }

    /// Builds a gray image from a per-pixel function of (x, y).
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::gray(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Luma value of one pixel: 0.299R + 0.587G + 0.114B rounded to nearest.
    pub fn luma(&self, x: u32, y: u32) -> u8 {
        let i = (y as usize * self.width as usize + x as usize) * self.channels as usize;
        if self.channels == 1 {
            self.pixels[i]
        } else {
            luma(self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
        }
    }

    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Copies the pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<ImageBuffer, ImageError> {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(ImageError::ZeroArea);
        }
        let c = self.channels as usize;
        let mut pixels = Vec::with_capacity((x1 - x0) as usize * (y1 - y0) as usize * c);
        for y in y0..y1 {
            let row = (y as usize * self.width as usize) * c;
            pixels.extend_from_slice(&self.pixels[row + x0 as usize * c..row + x1 as usize * c]);
        }
        ImageBuffer::new(x1 - x0, y1 - y0, self.channels, pixels)
    }

    /// Hex SHA-256 over dimensions and pixels; used as the content address
    /// for adapter requests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update([self.channels]);
        hasher.update(&self.pixels);
        hex::encode(hasher.finalize())
    }

    pub fn open(path: &std::path::Path) -> Result<ImageBuffer, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let img = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                return ImageBuffer::gray(w, h, g.into_raw());
            }
            other => other.to_rgb8(),
        };
        let (w, h) = img.dimensions();
        ImageBuffer::rgb(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<(), ImageError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(path, &self.pixels, self.width, self.height, color, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        use image::ImageEncoder;
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(&self.pixels, self.width, self.height, color)?;
        Ok(out)
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Pixels of a frame, either decoded or loaded on demand from disk.
///
/// Equality ignores pixel data entirely; frames compare by `FrameRef`.
#[derive(Debug, Clone)]
pub enum FrameImage {
    Decoded(Arc<ImageBuffer>),
    Lazy(PathBuf),
    Missing,
}

impl FrameImage {
    pub fn load(&self) -> Result<Arc<ImageBuffer>, ImageError> {
        match self {
            FrameImage::Decoded(img) => Ok(img.clone()),
            FrameImage::Lazy(path) => ImageBuffer::open(path).map(Arc::new),
            FrameImage::Missing => Err(ImageError::Missing),
        }
    }
}

impl From<ImageBuffer> for FrameImage {
    fn from(img: ImageBuffer) -> Self {
        FrameImage::Decoded(Arc::new(img))
    }
}

impl PartialEq for FrameImage {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_ref: FrameRef,
    pub image: FrameImage,
}

impl Frame {
    pub fn new(frame_ref: FrameRef, image: impl Into<FrameImage>) -> Self {
        Self {
            frame_ref,
            image: image.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTiming {
    pub surface: String,
    pub start: f64,
    pub end: f64,
}

impl WordTiming {
    pub fn new(surface: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            surface: surface.into(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub text: String,
    pub words: Vec<WordTiming>,
    pub start: f64,
    pub end: f64,
}

impl TranscriptSegment {
    pub fn new(text: impl Into<String>, words: Vec<WordTiming>, start: f64, end: f64) -> Self {
        Self {
            text: text.into(),
            words,
            start,
            end,
        }
    }

    /// Transcript built from word timings; text is the space-joined surfaces.
    pub fn from_words(words: Vec<WordTiming>) -> Self {
        let text = words.iter().map(|w| w.surface.as_str()).collect::<Vec<_>>().join(" ");
        let start = words.first().map_or(0.0, |w| w.start);
        let end = words.last().map_or(0.0, |w| w.end);
        Self { text, words, start, end }
    }

    /// A silent stretch: no words, no text, but a known span.
    pub fn silent(start: f64, end: f64) -> Self {
        Self {
            text: String::new(),
            words: Vec::new(),
            start,
            end,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty() && self.text.trim().is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        (!self.is_empty()).then_some((self.start, self.end))
    }
}

static SLOT_SEQUENCE: AtomicU64 = AtomicU64::new(1);

/// Payload kinds a slot may carry. Every element of the typed variants names
/// the frame it was inferred from.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotPayload {
    Tags(Vec<FrameTags>),
    Ocr(Vec<FrameOcr>),
    Detections(Vec<FrameDetections>),
    Captions(Vec<FrameCaption>),
    Triplets(Vec<Triplet>),
    Keyframes(KeyframeSelection),
    Value(serde_json::Value),
}

impl SlotPayload {
    pub fn frame_refs(&self) -> Vec<&FrameRef> {
        match self {
            SlotPayload::Tags(v) => v.iter().map(|t| &t.frame).collect(),
            SlotPayload::Ocr(v) => v.iter().map(|t| &t.frame).collect(),
            SlotPayload::Detections(v) => v.iter().map(|t| &t.frame).collect(),
            SlotPayload::Captions(v) => v.iter().map(|t| &t.frame).collect(),
            SlotPayload::Triplets(v) => v.iter().map(|t| &t.frame).collect(),
            SlotPayload::Keyframes(sel) => sel.keyframes.iter().map(|k| &k.frame).collect(),
            SlotPayload::Value(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSlot {
    pub key: String,
    pub payload: SlotPayload,
    pub producer: String,
    pub produced_at: u64,
}

impl InferenceSlot {
    pub fn new(key: impl Into<String>, payload: SlotPayload, producer: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            payload,
            producer: producer.into(),
            produced_at: SLOT_SEQUENCE.fetch_add(1, AtomicOrdering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowId(String);

impl WindowId {
    pub fn new(video_id: &str, window_index: u32) -> Self {
        WindowId(format!("{video_id}#{window_index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataWindow {
    id: WindowId,
    video_id: String,
    index: u32,
    frames: Vec<Frame>,
    transcript: TranscriptSegment,
    slots: BTreeMap<String, InferenceSlot>,
}

impl DataWindow {
    pub fn new(
        video_id: impl Into<String>,
        index: u32,
        frames: Vec<Frame>,
        transcript: TranscriptSegment,
    ) -> Result<Self, WindowError> {
        let video_id = video_id.into();
        let id = WindowId::new(&video_id, index);
        if frames.is_empty() && transcript.is_empty() {
            return Err(WindowError::EmptyWindow(id.to_string()));
        }
        for w in &transcript.words {
            if !(w.start.is_finite() && w.end.is_finite()) || w.start < 0.0 {
                return Err(WindowError::InvalidTimestamp(w.start));
            }
        }
        let span = transcript.span();
        for (i, frame) in frames.iter().enumerate() {
            let fr = &frame.frame_ref;
            if !fr.timestamp.is_finite() || fr.timestamp < 0.0 {
                return Err(WindowError::InvalidTimestamp(fr.timestamp));
            }
            if fr.video_id != video_id || fr.window_index != index {
                return Err(WindowError::ForeignFrameRef {
                    window: id.to_string(),
                    video_id: fr.video_id.clone(),
                    frame_index: fr.frame_index,
                });
            }
            if i > 0 {
                let prev = &frames[i - 1].frame_ref;
                if fr.frame_index <= prev.frame_index || fr.timestamp < prev.timestamp {
                    return Err(WindowError::UnorderedFrames {
                        window: id.to_string(),
                        frame_index: fr.frame_index,
                    });
                }
            }
            if let Some((start, end)) = span {
                if fr.timestamp < start || fr.timestamp > end {
                    return Err(WindowError::FrameOutsideTranscript {
                        window: id.to_string(),
                        frame_index: fr.frame_index,
                        timestamp: fr.timestamp,
                    });
                }
            }
        }
        Ok(Self {
            id,
            video_id,
            index,
            frames,
            transcript,
            slots: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> &WindowId {
        &self.id
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, frame_index: u64) -> Option<&Frame> {
        self.frames.iter().find(|f| f.frame_ref.frame_index == frame_index)
    }

    pub fn transcript(&self) -> &TranscriptSegment {
        &self.transcript
    }

    pub fn slots(&self) -> &BTreeMap<String, InferenceSlot> {
        &self.slots
    }

    pub fn slot(&self, key: &str) -> Option<&InferenceSlot> {
        self.slots.get(key)
    }

    pub fn contains_frame(&self, frame: &FrameRef) -> bool {
        self.frames.iter().any(|f| f.frame_ref.same_frame(frame))
    }

    /// Adds or replaces one slot. Replacement is only allowed for the
    /// producer that originally wrote the key.
    pub fn put_slot(mut self, slot: InferenceSlot) -> Result<Self, WindowError> {
        for fr in slot.payload.frame_refs() {
            if !self.contains_frame(fr) {
                return Err(WindowError::ForeignFrameRef {
                    window: self.id.to_string(),
                    video_id: fr.video_id.clone(),
                    frame_index: fr.frame_index,
                });
            }
        }
        if let Some(existing) = self.slots.get(&slot.key) {
            if existing.producer != slot.producer {
                return Err(WindowError::KeyCollision {
                    window: self.id.to_string(),
                    key: slot.key.clone(),
                    owner: existing.producer.clone(),
                    producer: slot.producer,
                });
            }
        }
        self.slots.insert(slot.key.clone(), slot);
        Ok(self)
    }

    /// `(start, end)` over the transcript span and all frame timestamps.
    pub fn span(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        if let Some((s, e)) = self.transcript.span() {
            lo = lo.min(s);
            hi = hi.max(e);
        }
        for f in &self.frames {
            lo = lo.min(f.frame_ref.timestamp);
            hi = hi.max(f.frame_ref.timestamp);
        }
        (lo, hi)
    }

    pub(crate) fn into_slots(self) -> BTreeMap<String, InferenceSlot> {
        self.slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Tag;

    fn frames(video: &str, ts: &[(u64, f64)]) -> Vec<Frame> {
        ts.iter()
            .map(|&(i, t)| Frame::new(FrameRef::new(video, 0, i, t), FrameImage::Missing))
            .collect()
    }

    fn transcript(start: f64, end: f64) -> TranscriptSegment {
        TranscriptSegment::new("words here", vec![], start, end)
    }

    fn tags_slot(window: &DataWindow, producer: &str) -> InferenceSlot {
        let frame = window.frames()[0].frame_ref.clone();
        InferenceSlot::new(
            keys::TAGS,
            SlotPayload::Tags(vec![FrameTags {
                frame,
                tags: vec![Tag::new("chef", 0.9)],
            }]),
            producer,
        )
    }

    #[test]
    fn new_window_has_no_slots() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0), (1, 1.0), (2, 2.0)]), transcript(0.0, 2.5)).unwrap();
        assert_eq!(w.frames().len(), 3);
        assert!(w.slots().is_empty());
        assert_eq!(w.id().as_str(), "v1#0");
    }

    #[test]
    fn empty_window_rejected() {
        let err = DataWindow::new("v1", 0, vec![], TranscriptSegment::default()).unwrap_err();
        assert!(matches!(err, WindowError::EmptyWindow(_)));
    }

    #[test]
    fn unordered_frames_rejected() {
        let err = DataWindow::new("v1", 0, frames("v1", &[(2, 2.0), (1, 1.0)]), transcript(0.0, 3.0)).unwrap_err();
        assert!(matches!(err, WindowError::UnorderedFrames { .. }));
    }

    #[test]
    fn frame_outside_transcript_rejected() {
        let err = DataWindow::new("v1", 0, frames("v1", &[(5, 5.0)]), transcript(0.0, 3.0)).unwrap_err();
        assert!(matches!(err, WindowError::FrameOutsideTranscript { .. }));
    }

    #[test]
    fn slot_round_trips() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0)]), transcript(0.0, 1.0)).unwrap();
        let slot = tags_slot(&w, "tagger");
        let w = w.put_slot(slot.clone()).unwrap();
        assert_eq!(w.slot(keys::TAGS), Some(&slot));
    }

    #[test]
    fn foreign_frame_rejected() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0)]), transcript(0.0, 1.0)).unwrap();
        let slot = InferenceSlot::new(
            keys::TAGS,
            SlotPayload::Tags(vec![FrameTags {
                frame: FrameRef::new("other", 0, 0, 0.0),
                tags: vec![],
            }]),
            "tagger",
        );
        assert!(matches!(w.put_slot(slot), Err(WindowError::ForeignFrameRef { .. })));
    }

    #[test]
    fn cross_producer_collision_rejected() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0)]), transcript(0.0, 1.0)).unwrap();
        let a = tags_slot(&w, "A");
        let b = tags_slot(&w, "B");
        let w = w.put_slot(a.clone()).unwrap();
        assert!(matches!(w.clone().put_slot(b), Err(WindowError::KeyCollision { .. })));
        // same producer may replace
        let again = tags_slot(&w, "A");
        assert!(w.put_slot(again).is_ok());
    }

    #[test]
    fn put_is_idempotent() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0)]), transcript(0.0, 1.0)).unwrap();
        let slot = tags_slot(&w, "A");
        let once = w.clone().put_slot(slot.clone()).unwrap();
        let twice = once.clone().put_slot(slot).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn slot_insertion_order_does_not_matter() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(0, 0.0)]), transcript(0.0, 1.0)).unwrap();
        let a = InferenceSlot::new("a", SlotPayload::Value(1.into()), "p");
        let b = InferenceSlot::new("b", SlotPayload::Value(2.into()), "q");
        let ab = w.clone().put_slot(a.clone()).unwrap().put_slot(b.clone()).unwrap();
        let ba = w.put_slot(b).unwrap().put_slot(a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn span_covers_frames_and_transcript() {
        let w = DataWindow::new("v1", 0, frames("v1", &[(1, 1.0), (2, 2.0)]), transcript(0.5, 2.5)).unwrap();
        assert_eq!(w.span(), (0.5, 2.5));
        let w = DataWindow::new("v1", 0, frames("v1", &[(3, 3.0)]), TranscriptSegment::default()).unwrap();
        assert_eq!(w.span(), (3.0, 3.0));
        let w = DataWindow::new("v1", 0, vec![], transcript(0.0, 4.0)).unwrap();
        assert_eq!(w.span(), (0.0, 4.0));
    }

    #[test]
    fn luma_of_pure_red() {
        assert_eq!(luma(255, 0, 0), 76);
    }
}
