//! Payload element types shared by slots, adapters and the knowledge base.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::window::FrameRef;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box [{0}, {1}, {2}, {3}] is not inside the unit square with x0<x1, y0<y1")]
    Invalid(f64, f64, f64, f64),
}

/// Axis-aligned box in normalized image coordinates.
///
/// Deserialization does not validate; callers check `validate` so errors can
/// name the offending record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, BoxError> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if [self.x0, self.y0, self.x1, self.y1].iter().all(|v| in_unit(*v)) && self.x0 < self.x1 && self.y0 < self.y1 {
            Ok(())
        } else {
            Err(BoxError::Invalid(self.x0, self.y0, self.x1, self.y1))
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Total order used for deterministic sorting and deduplication.
    pub fn sort_key(&self) -> [u64; 4] {
        [self.x0.to_bits(), self.y0.to_bits(), self.x1.to_bits(), self.y1.to_bits()]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub label: String,
    pub confidence: f64,
}

impl Tag {
    pub fn new(label: impl Into<String>, confidence: f64) -> Self {
        Self {
            label: label.into(),
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSpan {
    pub text: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTags {
    pub frame: FrameRef,
    pub tags: Vec<Tag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOcr {
    pub frame: FrameRef,
    pub spans: Vec<OcrSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: FrameRef,
    pub detections: Vec<Detection>,
}

/// One caption of a frame or of a crop of it. Branch 0 is the whole frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCaption {
    pub frame: FrameRef,
    pub branch_index: u32,
    pub text: String,
    pub crop: Option<BBox>,
}

pub fn valid_confidence(c: f64) -> bool {
    (0.0..=1.0).contains(&c)
}
