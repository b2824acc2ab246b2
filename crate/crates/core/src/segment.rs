//! Transcript-driven window generation: parse word timings, re-segment into
//! sentences, greedily grow coherent paragraphs, and emit one `DataWindow`
//! per paragraph with the frames sampled from its span.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::window::WordTiming;
use crate::text::{content_words, parse_word_list};
use crate::window::{DataWindow, Frame, FrameImage, FrameRef, TranscriptSegment};

const ABBREVIATIONS_TXT: &str = include_str!("../data/abbreviations.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("malformed transcript document: {0}")]
    Malformed(String),
    #[error("word {index} ({surface:?}) has non-monotonic times [{start}, {end}]")]
    NonMonotonicTimes {
        index: usize,
        surface: String,
        start: f64,
        end: f64,
    },
    #[error("invalid segmenter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WordDoc {
    w: String,
    s: f64,
    e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptDoc {
    video_id: String,
    words: Vec<WordDoc>,
}

/// A parsed transcript interchange document.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub video_id: String,
    pub words: Vec<WordTiming>,
}

impl Transcript {
    /// Serializes to the interchange schema `{video_id, words: [{w, s, e}]}`.
    pub fn to_json(&self) -> String {
        let doc = TranscriptDoc {
            video_id: self.video_id.clone(),
            words: self
                .words
                .iter()
                .map(|w| WordDoc {
                    w: w.surface.clone(),
                    s: w.start,
                    e: w.end,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("transcript serializes")
    }
}

/// Parses `{video_id, words: [{w, s, e}]}`. Words come back ordered by start.
pub fn parse_transcript(document: &str) -> Result<Transcript, SegmentError> {
    let doc: TranscriptDoc = serde_json::from_str(document).map_err(|e| SegmentError::Malformed(e.to_string()))?;
    let mut words = Vec::with_capacity(doc.words.len());
    for (index, w) in doc.words.into_iter().enumerate() {
        if !(w.s.is_finite() && w.e.is_finite()) || w.s < 0.0 || w.s > w.e {
            return Err(SegmentError::NonMonotonicTimes {
                index,
                surface: w.w,
                start: w.s,
                end: w.e,
            });
        }
        words.push(WordTiming::new(w.w, w.s, w.e));
    }
    words.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(Transcript {
        video_id: doc.video_id,
        words,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub words: Vec<WordTiming>,
    pub start: f64,
    pub end: f64,
}

impl Sentence {
    pub fn from_words(words: Vec<WordTiming>) -> Self {
        let text = words.iter().map(|w| w.surface.as_str()).collect::<Vec<_>>().join(" ");
        let start = words.first().map_or(0.0, |w| w.start);
        let end = words.last().map_or(0.0, |w| w.end);
        Self { text, words, start, end }
    }
}

pub trait SentenceSplitter {
    fn split(&self, words: &[WordTiming]) -> Vec<Sentence>;
}

/// Splits after `.`, `!` or `?` unless the token is a known abbreviation.
#[derive(Debug, Clone)]
pub struct RuleSplitter {
    abbreviations: HashSet<String>,
}

impl Default for RuleSplitter {
    fn default() -> Self {
        static ABBR: OnceLock<HashSet<String>> = OnceLock::new();
        Self {
            abbreviations: ABBR.get_or_init(|| parse_word_list(ABBREVIATIONS_TXT)).clone(),
        }
    }
}

impl RuleSplitter {
    pub fn with_abbreviations(abbreviations: HashSet<String>) -> Self {
        Self { abbreviations }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::with_abbreviations(parse_word_list(&std::fs::read_to_string(path)?)))
    }

    fn ends_sentence(&self, surface: &str) -> bool {
        let core = surface.trim_end_matches(['"', '\'', ')', ']', '”', '’']);
        let Some(last) = core.chars().last() else {
            return false;
        };
        if !matches!(last, '.' | '!' | '?') {
            return false;
        }
        !(last == '.' && self.abbreviations.contains(&core.to_lowercase()))
    }
}

impl SentenceSplitter for RuleSplitter {
    fn split(&self, words: &[WordTiming]) -> Vec<Sentence> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for w in words {
            current.push(w.clone());
            if self.ends_sentence(&w.surface) {
                out.push(Sentence::from_words(std::mem::take(&mut current)));
            }
        }
        if !current.is_empty() {
            out.push(Sentence::from_words(current));
        }
        out
    }
}

/// Sentence segmentation with the default rule splitter.
pub fn segment_sentences(words: &[WordTiming]) -> Vec<Sentence> {
    RuleSplitter::default().split(words)
}

/// Scores how well `candidate` continues `context`, in [0, 1].
pub trait CoherencyScorer {
    fn score(&self, context: &[Sentence], candidate: &Sentence) -> f64;
}

/// Cosine similarity of term-frequency vectors over lowercased,
/// stopword-stripped tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosineScorer;

fn tf(texts: &[&str]) -> BTreeMap<String, f64> {
    let mut v = BTreeMap::new();
    for t in texts {
        for w in content_words(t) {
            *v.entry(w).or_insert(0.0) += 1.0;
        }
    }
    v
}

pub fn tf_cosine(a: &[&str], b: &[&str]) -> f64 {
    let va = tf(a);
    let vb = tf(b);
    let na: f64 = va.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = va.iter().map(|(w, x)| x * vb.get(w).copied().unwrap_or(0.0)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

impl CoherencyScorer for TfCosineScorer {
    fn score(&self, context: &[Sentence], candidate: &Sentence) -> f64 {
        let ctx: Vec<&str> = context.iter().map(|s| s.text.as_str()).collect();
        tf_cosine(&ctx, &[candidate.text.as_str()])
    }
}

/// Default scorer applied to raw strings.
pub fn coherency_score(context: &[&str], candidate: &str) -> f64 {
    tf_cosine(context, &[candidate])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub coherency_threshold: f64,
    pub max_sentences_per_paragraph: usize,
    pub max_paragraph_duration: f64,
    /// Uncovered stretches shorter than this are not emitted as silent windows.
    pub min_silent_gap: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            coherency_threshold: 0.15,
            max_sentences_per_paragraph: 12,
            max_paragraph_duration: 30.0,
            min_silent_gap: 1.0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(0.0..=1.0).contains(&self.coherency_threshold) {
            return Err(SegmentError::Config(format!(
                "coherency_threshold {} outside [0, 1]",
                self.coherency_threshold
            )));
        }
        if self.max_sentences_per_paragraph == 0 {
            return Err(SegmentError::Config("max_sentences_per_paragraph must be positive".into()));
        }
        if !(self.max_paragraph_duration > 0.0) {
            return Err(SegmentError::Config("max_paragraph_duration must be positive".into()));
        }
        if !(self.min_silent_gap >= 0.0) {
            return Err(SegmentError::Config("min_silent_gap must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paragraph {
    pub sentences: Vec<Sentence>,
    pub start: f64,
    pub end: f64,
}

impl Paragraph {
    fn from_sentences(sentences: Vec<Sentence>) -> Self {
        let start = sentences.first().map_or(0.0, |s| s.start);
        let end = sentences.last().map_or(0.0, |s| s.end);
        Self { sentences, start, end }
    }

    pub fn words(&self) -> Vec<WordTiming> {
        self.sentences.iter().flat_map(|s| s.words.iter().cloned()).collect()
    }

    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Greedy paragraph growth: keep appending the next sentence while it scores
/// at least the threshold against the paragraph so far and neither size limit
/// would be exceeded.
pub fn build_paragraphs(sentences: &[Sentence], config: &SegmenterConfig, scorer: &dyn CoherencyScorer) -> Vec<Paragraph> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < sentences.len() {
        let mut end = start + 1;
        while end < sentences.len() {
            let next = &sentences[end];
            if end - start >= config.max_sentences_per_paragraph
                || next.end - sentences[start].start > config.max_paragraph_duration
            {
                break;
            }
            if scorer.score(&sentences[start..end], next) < config.coherency_threshold {
                break;
            }
            end += 1;
        }
        out.push(Paragraph::from_sentences(sentences[start..end].to_vec()));
        start = end;
    }
    out
}

/// Where frames come from: a decoded video or a directory of frame images.
pub trait FrameSource: Send + Sync {
    fn video_id(&self) -> &str;
    fn duration(&self) -> f64;
    fn native_fps(&self) -> f64;
    fn frame(&self, frame_index: u64) -> Option<FrameImage>;
}

/// Frames held in memory or as lazy file handles.
#[derive(Debug, Clone)]
pub struct StaticFrameSource {
    pub video_id: String,
    pub duration: f64,
    pub native_fps: f64,
    pub frames: BTreeMap<u64, FrameImage>,
}

impl StaticFrameSource {
    /// Loads `<frame_index>.png` (or `.pgm`/`.ppm`) files from `dir` as lazy handles.
    pub fn from_dir(video_id: &str, dir: &Path, native_fps: f64, duration: Option<f64>) -> std::io::Result<Self> {
        let mut frames = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext, "png" | "pgm" | "ppm") {
                continue;
            }
            if let Ok(idx) = stem.parse::<u64>() {
                frames.insert(idx, FrameImage::Lazy(path.clone()));
            }
        }
        let last = frames.keys().next_back().map_or(0.0, |&i| (i + 1) as f64 / native_fps);
        Ok(Self {
            video_id: video_id.to_string(),
            duration: duration.unwrap_or(last),
            native_fps,
            frames,
        })
    }
}

impl FrameSource for StaticFrameSource {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn duration(&self) -> f64 {
        self.duration
    }

    fn native_fps(&self) -> f64 {
        self.native_fps
    }

    fn frame(&self, frame_index: u64) -> Option<FrameImage> {
        self.frames.get(&frame_index).cloned()
    }
}

/// Maps a time span to `(frame_index, timestamp)` samples.
pub trait FrameSampler: Send + Sync {
    fn sample(&self, source: &dyn FrameSource, start: f64, end: f64) -> Vec<(u64, f64)>;
}

/// Samples at `fps` on the grid `k / fps` inside `[start, end)`.
#[derive(Debug, Clone, Copy)]
pub struct UniformSampler {
    pub fps: f64,
}

impl FrameSampler for UniformSampler {
    fn sample(&self, source: &dyn FrameSource, start: f64, end: f64) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        if !(self.fps > 0.0) || end <= start {
            return out;
        }
        let eps = 1e-9;
        let mut k = (start * self.fps - eps).ceil().max(0.0) as u64;
        loop {
            let t = k as f64 / self.fps;
            if t >= end - eps {
                break;
            }
            let idx = (t * source.native_fps() + eps).floor() as u64;
            if out.last().map_or(true, |&(i, _)| i < idx) && source.frame(idx).is_some() {
                out.push((idx, t));
            }
            k += 1;
        }
        out
    }
}

enum Segment {
    Spoken(Paragraph, f64, f64),
    Silent(f64, f64),
}

/// Lazily yields one window per paragraph plus windows for uncovered
/// stretches that hold frames (chunked by `max_paragraph_duration`).
pub struct WindowGenerator {
    source: Arc<dyn FrameSource>,
    sampler: Arc<dyn FrameSampler>,
    plan: std::vec::IntoIter<Segment>,
    next_index: u32,
}

impl Iterator for WindowGenerator {
    type Item = DataWindow;

    fn next(&mut self) -> Option<DataWindow> {
        for seg in self.plan.by_ref() {
            let (start, end, transcript) = match seg {
                Segment::Spoken(p, s, e) => (s, e, TranscriptSegment::new(p.text(), p.words(), p.start, p.end)),
                Segment::Silent(s, e) => (s, e, TranscriptSegment::silent(s, e)),
            };
            let samples = self.sampler.sample(self.source.as_ref(), start, end);
            if samples.is_empty() && transcript.is_empty() {
                continue;
            }
            let video = self.source.video_id().to_string();
            let frames = samples
                .into_iter()
                .map(|(idx, t)| {
                    Frame::new(
                        FrameRef::new(video.clone(), self.next_index, idx, t),
                        self.source.frame(idx).unwrap_or(FrameImage::Missing),
                    )
                })
                .collect();
            match DataWindow::new(video, self.next_index, frames, transcript) {
                Ok(w) => {
                    self.next_index += 1;
                    return Some(w);
                }
                Err(e) => log::warn!("skipping segment [{start}, {end}]: {e}"),
            }
        }
        None
    }
}

pub fn generate_windows(
    source: Arc<dyn FrameSource>,
    paragraphs: Vec<Paragraph>,
    sampler: Arc<dyn FrameSampler>,
    config: &SegmenterConfig,
) -> WindowGenerator {
    let duration = source.duration().max(0.0);
    let mut plan = Vec::new();
    let mut cursor = 0.0;
    let push_silent = |plan: &mut Vec<Segment>, from: f64, to: f64| {
        if to - from < config.min_silent_gap || to <= from {
            return;
        }
        let mut s = from;
        while s < to {
            let e = (s + config.max_paragraph_duration).min(to);
            plan.push(Segment::Silent(s, e));
            s = e;
        }
    };
    for p in paragraphs {
        let (mut s, mut e) = (p.start, p.end);
        if s < 0.0 || e > duration {
            log::warn!(
                "paragraph span [{s}, {e}] outside video {} duration {duration}; clamping",
                source.video_id()
            );
            s = s.clamp(0.0, duration);
            e = e.clamp(0.0, duration);
        }
        push_silent(&mut plan, cursor, s);
        cursor = cursor.max(e);
        plan.push(Segment::Spoken(p, s, e));
    }
    push_silent(&mut plan, cursor, duration);
    WindowGenerator {
        source,
        sampler,
        plan: plan.into_iter(),
        next_index: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn words(text: &str) -> Vec<WordTiming> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| WordTiming::new(w, i as f64, i as f64 + 0.5))
            .collect()
    }

    fn sentence(text: &str, start: f64, end: f64) -> Sentence {
        Sentence {
            text: text.into(),
            words: vec![WordTiming::new(text, start, end)],
            start,
            end,
        }
    }

    #[test]
    fn parses_two_words() {
        let doc = r#"{"video_id":"v","words":[{"w":"world","s":0.5,"e":0.9},{"w":"hello","s":0.0,"e":0.4}]}"#;
        let t = parse_transcript(doc).unwrap();
        assert_eq!(t.words.len(), 2);
        assert_eq!(t.words[0].surface, "hello");
        assert_eq!(t.words[1].surface, "world");
    }

    #[test]
    fn empty_word_list_is_legal() {
        let t = parse_transcript(r#"{"video_id":"v","words":[]}"#).unwrap();
        assert!(t.words.is_empty());
    }

    #[test]
    fn rejects_start_after_end() {
        let doc = r#"{"video_id":"v","words":[{"w":"x","s":1.0,"e":0.5}]}"#;
        assert!(matches!(parse_transcript(doc), Err(SegmentError::NonMonotonicTimes { .. })));
        assert!(matches!(parse_transcript("{"), Err(SegmentError::Malformed(_))));
        assert!(matches!(parse_transcript(r#"{"words":[]}"#), Err(SegmentError::Malformed(_))));
    }

    #[test]
    fn transcript_json_round_trips() {
        let t = Transcript {
            video_id: "v".into(),
            words: words("a b c"),
        };
        assert_eq!(parse_transcript(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        let s = segment_sentences(&words("I ran. She laughed."));
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "I ran.");
        assert_eq!((s[0].start, s[0].end), (0.0, 1.5));
        assert_eq!((s[1].start, s[1].end), (2.0, 3.5));
    }

    #[test]
    fn abbreviation_does_not_split() {
        let s = segment_sentences(&words("Dr. Smith arrived."));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn no_punctuation_is_one_sentence() {
        let s = segment_sentences(&words("one two three four five six seven eight nine ten eleven twelve"));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].words.len(), 12);
    }

    #[test]
    fn coherency_examples() {
        assert!((coherency_score(&["the red car stopped"], "the red car stopped") - 1.0).abs() < 1e-12);
        assert_eq!(coherency_score(&["red car"], "blue boat"), 0.0);
        let expected = 1.0 / (6.0f64).sqrt();
        assert!((coherency_score(&["the red car stopped"], "the car turned") - expected).abs() < 1e-12);
        assert_eq!(coherency_score(&["red car"], "the of and"), 0.0);
    }

    struct Scripted(RefCell<std::vec::IntoIter<f64>>);

    impl CoherencyScorer for Scripted {
        fn score(&self, _: &[Sentence], _: &Sentence) -> f64 {
            self.0.borrow_mut().next().expect("script exhausted")
        }
    }

    fn scripted(v: Vec<f64>) -> Scripted {
        Scripted(RefCell::new(v.into_iter()))
    }

    #[test]
    fn greedy_trace() {
        let s: Vec<Sentence> = (0..4).map(|i| sentence("s", i as f64, i as f64 + 1.0)).collect();
        let cfg = SegmenterConfig {
            coherency_threshold: 0.5,
            ..Default::default()
        };
        let p = build_paragraphs(&s, &cfg, &scripted(vec![0.8, 0.2, 0.9]));
        assert_eq!(p.iter().map(|p| p.sentences.len()).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn threshold_extremes() {
        let s: Vec<Sentence> = (0..5).map(|i| sentence("alpha beta", i as f64, i as f64 + 1.0)).collect();
        let zero = SegmenterConfig {
            coherency_threshold: 0.0,
            ..Default::default()
        };
        assert_eq!(build_paragraphs(&s, &zero, &TfCosineScorer).len(), 1);
        let above = SegmenterConfig {
            coherency_threshold: 1.0 + 1e-9,
            ..Default::default()
        };
        assert_eq!(build_paragraphs(&s, &above, &TfCosineScorer).len(), 5);
    }

    #[test]
    fn limits_cut_paragraphs() {
        let s: Vec<Sentence> = (0..5).map(|i| sentence("alpha", i as f64 * 10.0, i as f64 * 10.0 + 9.0)).collect();
        let by_count = SegmenterConfig {
            coherency_threshold: 0.0,
            max_sentences_per_paragraph: 2,
            ..Default::default()
        };
        assert_eq!(build_paragraphs(&s, &by_count, &TfCosineScorer).len(), 3);
        let by_time = SegmenterConfig {
            coherency_threshold: 0.0,
            max_paragraph_duration: 25.0,
            ..Default::default()
        };
        // [0,19] fits, adding [20,29] would span 29 s
        assert_eq!(build_paragraphs(&s, &by_time, &TfCosineScorer).len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(SegmenterConfig::default().validate().is_ok());
        let bad = SegmenterConfig {
            coherency_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn source(duration: f64) -> Arc<dyn FrameSource> {
        let native = 10.0;
        let frames = (0..(duration * native) as u64).map(|i| (i, FrameImage::Missing)).collect();
        Arc::new(StaticFrameSource {
            video_id: "v".into(),
            duration,
            native_fps: native,
            frames,
        })
    }

    fn paragraph(start: f64, end: f64) -> Paragraph {
        Paragraph::from_sentences(vec![Sentence::from_words(vec![
            WordTiming::new("hello", start, start + 0.1),
            WordTiming::new("there.", end - 0.1, end),
        ])])
    }

    #[test]
    fn one_window_per_paragraph() {
        let cfg = SegmenterConfig::default();
        let ws: Vec<DataWindow> = generate_windows(
            source(9.0),
            vec![paragraph(0.0, 4.0), paragraph(4.0, 9.0)],
            Arc::new(UniformSampler { fps: 1.0 }),
            &cfg,
        )
        .collect();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].frames().len(), 4);
        assert_eq!(ws[1].frames().len(), 5);
        assert_eq!(ws[1].frames()[0].frame_ref.frame_index, 40);
        assert_eq!(ws[1].index(), 1);
    }

    #[test]
    fn silent_video_is_chunked() {
        let cfg = SegmenterConfig {
            max_paragraph_duration: 30.0,
            ..Default::default()
        };
        let ws: Vec<DataWindow> =
            generate_windows(source(70.0), vec![], Arc::new(UniformSampler { fps: 1.0 }), &cfg).collect();
        assert_eq!(ws.len(), 3);
        assert!(ws.iter().all(|w| w.transcript().is_empty()));
        assert_eq!(ws.iter().map(|w| w.frames().len()).collect::<Vec<_>>(), vec![30, 30, 10]);
    }

    #[test]
    fn empty_video_yields_nothing() {
        let cfg = SegmenterConfig::default();
        let n = generate_windows(source(0.0), vec![], Arc::new(UniformSampler { fps: 1.0 }), &cfg).count();
        assert_eq!(n, 0);
    }

    #[test]
    fn out_of_range_paragraph_is_clamped() {
        let cfg = SegmenterConfig::default();
        let ws: Vec<DataWindow> = generate_windows(
            source(3.0),
            vec![paragraph(0.0, 5.0)],
            Arc::new(UniformSampler { fps: 1.0 }),
            &cfg,
        )
        .collect();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].frames().len(), 3);
    }
}
