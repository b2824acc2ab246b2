//! Generator for the committed demo bundle under `fixtures/demo_bundle`.
//!
//! Two scripted scenes (a kitchen and a street), a transcript with one
//! paragraph per scene and a stub manifest answering every tagging, OCR,
//! grounding and captioning request the standard recipe can make.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vidkg_core::adapters::{
    focus_crops, CaptionRequest, CaptionResponse, GroundRequest, GroundResponse, MissingEntry, OcrRequest,
    OcrResponse, StubManifest, TagRequest, TagResponse, DEFAULT_CROP_PAD,
};
use vidkg_core::inference::{BBox, Detection, OcrSpan, Tag};
use vidkg_core::segment::Transcript;
use vidkg_core::window::{FrameRef, ImageBuffer, WordTiming};

pub const VIDEO_ID: &str = "demo_kitchen_street";
pub const CREATED_AT: &str = "2026-01-01T00:00:00Z";
pub const WIDTH: u32 = 64;
pub const HEIGHT: u32 = 48;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn bundle_dir() -> PathBuf {
    fixtures_dir().join("demo_bundle")
}

pub fn golden_kb_path() -> PathBuf {
    fixtures_dir().join("demo_bundle.kb.json")
}

struct Scene {
    background: u8,
    regions: [(u32, u32, u32, u32, u8); 2],
    blocks: [u32; 5],
    tags: &'static [(&'static str, f64)],
    ocr: (&'static str, f64),
    detections: [(&'static str, [f64; 4], f64); 2],
    caption: &'static str,
    crop_captions: [&'static str; 2],
}

const SCENES: [Scene; 2] = [
    Scene {
        background: 50,
        regions: [(6, 4, 30, 44, 200), (36, 24, 58, 44, 110)],
        blocks: [4, 2, 1, 4, 2],
        tags: &[("chef", 0.93), ("pot", 0.86), ("kitchen", 0.74), ("soup", 0.6)],
        ocr: ("SOUP", 0.9),
        detections: [
            ("chef", [0.09, 0.08, 0.47, 0.92], 0.88),
            ("pot", [0.56, 0.5, 0.91, 0.92], 0.81),
        ],
        caption: "A chef stirs soup in a pot.",
        crop_captions: ["The chef wears an apron.", "The pot sits on a stove."],
    },
    Scene {
        background: 170,
        regions: [(4, 5, 27, 46, 30), (32, 22, 62, 43, 90)],
        blocks: [2, 4, 2, 1, 4],
        tags: &[("policeman", 0.95), ("car", 0.9), ("street", 0.8)],
        ocr: ("POLICE", 0.95),
        detections: [
            ("policeman", [0.06, 0.1, 0.42, 0.95], 0.91),
            ("car", [0.5, 0.45, 0.97, 0.9], 0.87),
        ],
        caption: "A policeman stands next to a car on the street.",
        crop_captions: ["He wears a helmet.", "The car is parked on the street."],
    },
];

/// Frame `i` of the bundle: scene `i / 5`, with a checker patch whose block
/// size sets the frame's sharpness. Frames of one scene share a histogram.
pub fn frame_image(i: u64) -> ImageBuffer {
    let scene = &SCENES[(i / 5) as usize];
    let block = scene.blocks[(i % 5) as usize];
    let (px, py, _, _, base) = scene.regions[0];
    ImageBuffer::from_fn(WIDTH, HEIGHT, |x, y| {
        let mut v = scene.background;
        for &(x0, y0, x1, y1, level) in &scene.regions {
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                v = level;
            }
        }
        if (px + 2..px + 10).contains(&x) && (py + 2..py + 10).contains(&y) {
            let sign = if ((x - px) / block + (y - py) / block) % 2 == 0 { 1 } else { -1 };
            v = (base as i32 + sign * 40).clamp(0, 255) as u8;
        }
        v
    })
    .expect("valid frame")
}

pub fn transcript() -> Transcript {
    let sentences: [(&str, f64); 4] = [
        ("A chef cooks soup in the kitchen.", 0.2),
        ("The chef stirs the soup.", 2.4),
        ("A policeman walks down the street.", 5.2),
        ("The policeman patrols the street.", 7.4),
    ];
    let mut words = Vec::new();
    for (text, start) in sentences {
        for (k, w) in text.split_whitespace().enumerate() {
            let s = start + 0.3 * k as f64;
            words.push(WordTiming::new(w, s, s + 0.25));
        }
    }
    Transcript {
        video_id: VIDEO_ID.into(),
        words,
    }
}

pub fn manifest() -> StubManifest {
    let mut m = StubManifest {
        missing: MissingEntry::Error,
        ..StubManifest::default()
    };
    for i in 0..10u64 {
        let scene = &SCENES[(i / 5) as usize];
        let img = frame_image(i);
        let key = img.content_hash();
        m.insert::<TagRequest>(
            &key,
            &TagResponse {
                tags: scene
                    .tags
                    .iter()
                    .map(|&(label, confidence)| Tag {
                        label: label.into(),
                        confidence,
                    })
                    .collect(),
            },
        );
        m.insert::<OcrRequest>(
            &key,
            &OcrResponse {
                spans: vec![OcrSpan {
                    text: scene.ocr.0.into(),
                    bbox: Some(BBox {
                        x0: 0.7,
                        y0: 0.02,
                        x1: 0.98,
                        y1: 0.15,
                    }),
                    confidence: scene.ocr.1,
                }],
            },
        );
        let detections: Vec<Detection> = scene
            .detections
            .iter()
            .map(|&(label, b, confidence)| Detection {
                label: label.into(),
                bbox: BBox {
                    x0: b[0],
                    y0: b[1],
                    x1: b[2],
                    y1: b[3],
                },
                confidence,
            })
            .collect();
        m.insert::<GroundRequest>(&key, &GroundResponse { detections: detections.clone() });
        let frame = FrameRef::new(VIDEO_ID, 0, i, i as f64);
        for (spec, crop) in focus_crops(&frame, &img, &detections, DEFAULT_CROP_PAD).expect("crops") {
            let caption = match spec.branch_index {
                0 => scene.caption,
                b => scene.crop_captions[b as usize - 1],
            };
            m.insert::<CaptionRequest>(
                crop.content_hash(),
                &CaptionResponse {
                    caption: caption.into(),
                },
            );
        }
    }
    m
}

/// Writes the bundle (`video.toml`, `frames/`, `transcript.json`,
/// `stub_manifest.json`) into `dir`.
pub fn write_bundle(dir: &Path) {
    std::fs::create_dir_all(dir.join("frames")).unwrap();
    std::fs::write(
        dir.join("video.toml"),
        format!("video_id = \"{VIDEO_ID}\"\nnative_fps = 1.0\nduration = 10.0\n"),
    )
    .unwrap();
    for i in 0..10 {
        frame_image(i).save_png(&dir.join("frames").join(format!("{i}.png"))).unwrap();
    }
    std::fs::write(dir.join("transcript.json"), transcript().to_json()).unwrap();
    std::fs::write(dir.join("stub_manifest.json"), manifest().to_json()).unwrap();
}

/// Run config for the bundle with the store at `store`.
pub fn config(store: &Path) -> vidkg_core::recipe::RunConfig {
    let mut cfg = vidkg_core::recipe::RunConfig::load(&fixtures_dir().join("demo.toml")).expect("demo config");
    cfg.store = store.to_path_buf();
    cfg
}
