//! Mini-classifiers behind virtual synsets: candidate collection, logistic
//! regression training, and background re-indexing of stored graphs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::crop_rect;
use crate::graph::{lookup_term, EvidenceKey, EvidenceKind, SynsetNode, VideoKnowledgeGraph};
use crate::inference::BBox;
use crate::kb::{write_atomic, VideoKnowledgeBase};
use crate::keyframe::{gray_histogram, laplacian_variance};
use crate::lexicon::{LexiconDb, Pos, SynsetId};
use crate::store::{Store, StoreError};
use crate::window::ImageBuffer;

/// Dimension of the shipped crop descriptor.
pub const FEATURE_DIM: usize = 260;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("training needs both labels, got {positives} positive and {negatives} negative samples")]
    SingleClass { positives: usize, negatives: usize },
    #[error("feature dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid option: {0}")]
    Options(String),
    #[error("{0} does not occur in any stored graph")]
    ParentUnseen(SynsetId),
    #[error("unknown virtual synset {0}")]
    UnknownVirtual(SynsetId),
    #[error("no classifier for {0}")]
    NoClassifier(SynsetId),
    #[error("degenerate crop {0:?}")]
    DegenerateCrop([f64; 4]),
    #[error("a job for {0} is already active")]
    JobActive(SynsetId),
    #[error("{file}:{line}: {message}")]
    Registry { file: String, line: usize, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

/// An evidence crop of a parent synset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub video_id: String,
    pub window: u32,
    pub frame_index: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub label: Option<String>,
}

impl Candidate {
    fn sort_key(&self) -> (&str, u64, u32, [u64; 4]) {
        (&self.video_id, self.frame_index, self.window, self.bbox.sort_key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: Label,
    pub provenance: Option<Candidate>,
}

/// Whether a detection label names `parent` or one of its hyponyms.
fn label_under(label: &str, parent: &SynsetId, lexicon: &LexiconDb) -> bool {
    lookup_term(label, Pos::Noun, lexicon).is_some_and(|(_, ids)| {
        ids.iter().any(|id| id == parent || lexicon.ancestors(id).contains_key(parent))
    })
}

/// Evidence crops of `parent` in one video: detections under the parent in
/// each evidence frame, or the whole frame when none is.
pub fn video_candidates(
    graph: &VideoKnowledgeGraph,
    kb: &VideoKnowledgeBase,
    parent: &SynsetId,
    lexicon: &LexiconDb,
) -> Vec<Candidate> {
    let Some(node) = graph.node(parent) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for key in node.evidence.keys() {
        let Some(frame) = kb
            .windows
            .iter()
            .filter(|w| w.index == key.window)
            .flat_map(|w| &w.keyframes)
            .find(|f| f.frame_index == key.frame)
        else {
            continue;
        };
        let boxes: Vec<(BBox, Option<String>)> = frame
            .detections
            .iter()
            .filter(|d| label_under(&d.label, parent, lexicon))
            .map(|d| (d.bbox, Some(d.label.clone())))
            .collect();
        let boxes = if boxes.is_empty() { vec![(BBox::FULL, None)] } else { boxes };
        for (bbox, label) in boxes {
            out.push(Candidate {
                video_id: graph.video_id.clone(),
                window: key.window,
                frame_index: key.frame,
                bbox,
                label,
            });
        }
    }
    out
}

fn dedup_sorted(mut c: Vec<Candidate>) -> Vec<Candidate> {
    c.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    c.dedup_by(|a, b| a.video_id == b.video_id && a.frame_index == b.frame_index && a.bbox.sort_key() == b.bbox.sort_key());
    c
}

/// Annotation candidates for a new virtual synset under `parent`, ordered by
/// (video, frame) and capped at `limit`.
pub fn collect_candidates(
    parent: &SynsetId,
    store: &Store,
    lexicon: &LexiconDb,
    limit: usize,
) -> Result<Vec<Candidate>, LearningError> {
    let mut seen = false;
    let mut all = Vec::new();
    for (_, g) in store.latest_graphs(Some(lexicon))? {
        if !g.contains(parent) {
            continue;
        }
        seen = true;
        match store.load_kb(&g.video_id) {
            Ok(kb) => all.extend(video_candidates(&g, &kb, parent, lexicon)),
            Err(e) => log::warn!("{}: {e}", g.video_id),
        }
    }
    if !seen {
        return Err(LearningError::ParentUnseen(parent.clone()));
    }
    let mut out = dedup_sorted(all);
    out.truncate(limit);
    Ok(out)
}

/// Fixed-length descriptor of an image region.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, frame: &ImageBuffer, bbox: &BBox) -> Result<Vec<f64>, LearningError>;
}

/// Normalized 256-bin gray histogram, log Laplacian variance, and box
/// width, height and log aspect ratio.
#[derive(Debug, Clone, Copy, Default)]
pub struct CropDescriptor;

impl FeatureExtractor for CropDescriptor {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, frame: &ImageBuffer, bbox: &BBox) -> Result<Vec<f64>, LearningError> {
        let degenerate = || LearningError::DegenerateCrop((*bbox).into());
        let r = crop_rect(bbox, frame.width(), frame.height(), 0.0).ok_or_else(degenerate)?;
        let crop = frame.crop(r[0], r[1], r[2], r[3]).map_err(|_| degenerate())?;
        let mut f = gray_histogram(&crop).map_err(|_| degenerate())?.normalize().bins;
        f.push(laplacian_variance(&crop).map_or(0.0, |v| v.ln_1p()));
        f.push(bbox.width());
        f.push(bbox.height());
        f.push((bbox.width() / bbox.height()).ln());
        Ok(f)
    }
}

/// Per-dimension affine map to mean 0, variance 1. Constant dimensions map
/// to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs.first().map_or(0, Vec::len);
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = v.sqrt();
                // spread below rounding noise counts as constant
                if s > 1e-12 * m.abs().max(1.0) {
                    s
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lambda: f64,
    /// Step tried first at every epoch before halving.
    pub step: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            step: 1.0,
            max_epochs: 5000,
            tolerance: 1e-6,
            threshold: 0.5,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), LearningError> {
        let bad = |m: &str| Err(LearningError::Options(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub gradient_norm: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Objective after every accepted step, starting at the initial point.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub standardizer: Standardizer,
    pub meta: TrainingMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-m))` without overflow.
fn log_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/n) sum log(1 + exp(-y (w.x + b))) + lambda |w|^2` with `y` in {-1, 1}.
pub fn objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs.iter().zip(ys).map(|(x, y)| log_loss(y * (dot(w, x) + b))).sum::<f64>() / n;
    data + lambda * dot(w, w)
}

/// Analytic gradient of [`objective`] in `(w, b)`.
pub fn gradient(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|wi| 2.0 * lambda * wi).collect();
    let mut gb = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let coef = -y * sigmoid(-y * (dot(w, x) + b)) / n;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += coef * xi;
        }
        gb += coef;
    }
    (gw, gb)
}

fn check_dims(xs: &[Vec<f64>], d: usize) -> Result<(), LearningError> {
    for x in xs {
        if x.len() != d {
            return Err(LearningError::DimensionMismatch { expected: d, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LearningError::NonFinite("features"));
        }
    }
    Ok(())
}

/// Full-batch gradient descent on the standardized samples. Every epoch
/// tries `options.step` and halves it until the objective decreases by the
/// Armijo margin; training stops when the gradient norm drops below the
/// tolerance, no decreasing step exists, or the epoch budget is spent.
pub fn train_mini_classifier(samples: &[LabeledSample], options: &TrainOptions) -> Result<LinearModel, LearningError> {
    options.validate()?;
    let positives = samples.iter().filter(|s| s.label == Label::Positive).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LearningError::SingleClass { positives, negatives });
    }
    let d = samples[0].features.len();
    let raw: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    check_dims(&raw, d)?;
    let standardizer = Standardizer::fit(&raw);
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| standardizer.transform(x)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.label.sign()).collect();
    let lambda = options.lambda;

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut loss = objective(&w, b, &xs, &ys, lambda);
    let mut history = vec![loss];
    let mut epochs = 0;
    let mut gnorm;
    loop {
        let (gw, gb) = gradient(&w, b, &xs, &ys, lambda);
        gnorm = (dot(&gw, &gw) + gb * gb).sqrt();
        if gnorm < options.tolerance || epochs >= options.max_epochs {
            break;
        }
        let mut step = options.step;
        let accepted = loop {
            let cw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let cb = b - step * gb;
            let cl = objective(&cw, cb, &xs, &ys, lambda);
            if cl <= loss - 1e-4 * step * gnorm * gnorm {
                break Some((cw, cb, cl));
            }
            step /= 2.0;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cw, cb, cl)) = accepted else {
            break;
        };
        w = cw;
        b = cb;
        loss = cl;
        history.push(loss);
        epochs += 1;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(LearningError::NonFinite("weights"));
    }
    Ok(LinearModel {
        weights: w,
        bias: b,
        threshold: options.threshold,
        standardizer,
        meta: TrainingMeta {
            epochs,
            final_loss: loss,
            gradient_norm: gnorm,
            positives,
            negatives,
            loss_history: history,
        },
    })
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn probability(&self, features: &[f64]) -> Result<f64, LearningError> {
        if features.len() != self.dim() {
            return Err(LearningError::DimensionMismatch {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let x = self.standardizer.transform(features);
        Ok(sigmoid(dot(&self.weights, &x) + self.bias))
    }
}

/// `(accept, probability)`; accepted when the probability reaches the
/// threshold.
pub fn apply_classifier(model: &LinearModel, features: &[f64]) -> Result<(bool, f64), LearningError> {
    let p = model.probability(features)?;
    Ok((p >= model.threshold, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniClassifier {
    pub id: String,
    pub virtual_synset: SynsetId,
    pub model: LinearModel,
}

impl MiniClassifier {
    pub fn new(virtual_synset: SynsetId, model: LinearModel) -> Self {
        Self {
            id: format!("clf-{}", virtual_synset.lemma()),
            virtual_synset,
            model,
        }
    }
}

fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err("encoded length is not a multiple of 8".into());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Registry line:
/// `id|virtual_synset|d|weights|bias|threshold|mean;std|epochs;final_loss;positives;negatives`
/// with vectors as base64 little-endian f64.
pub fn classifier_line(c: &MiniClassifier) -> String {
    let m = &c.model;
    format!(
        "{}|{}|{}|{}|{:?}|{:?}|{};{}|{};{:?};{};{}",
        c.id,
        c.virtual_synset,
        m.dim(),
        encode_f64s(&m.weights),
        m.bias,
        m.threshold,
        encode_f64s(&m.standardizer.mean),
        encode_f64s(&m.standardizer.std),
        m.meta.epochs,
        m.meta.final_loss,
        m.meta.positives,
        m.meta.negatives
    )
}

pub fn parse_classifier_line(line: &str) -> Result<MiniClassifier, String> {
    let f: Vec<&str> = line.split('|').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 fields, found {}", f.len()));
    }
    let virtual_synset = SynsetId::parse(f[1]).map_err(|e| e.to_string())?;
    let d: usize = f[2].parse().map_err(|_| format!("bad dimension {:?}", f[2]))?;
    let weights = decode_f64s(f[3])?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
    let bias = num(f[4])?;
    let threshold = num(f[5])?;
    let (mean, std) = f[6].split_once(';').ok_or("bad standardization field")?;
    let standardizer = Standardizer {
        mean: decode_f64s(mean)?,
        std: decode_f64s(std)?,
    };
    let meta: Vec<&str> = f[7].split(';').collect();
    if meta.len() != 4 {
        return Err("bad metadata field".into());
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| format!("bad count {s:?}"));
    if weights.len() != d || standardizer.dim() != d || standardizer.std.len() != d {
        return Err(format!("vectors do not match dimension {d}"));
    }
    if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
        return Err("non-finite weights".into());
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(format!("threshold {threshold} outside (0, 1)"));
    }
    Ok(MiniClassifier {
        id: f[0].to_string(),
        virtual_synset,
        model: LinearModel {
            weights,
            bias,
            threshold,
            standardizer,
            meta: TrainingMeta {
                epochs: int(meta[0])?,
                final_loss: num(meta[1])?,
                gradient_norm: f64::NAN,
                positives: int(meta[2])?,
                negatives: int(meta[3])?,
                loss_history: vec![],
            },
        },
    })
}

/// Classifiers keyed by virtual synset, persisted as one line each.
#[derive(Debug, Default)]
pub struct ClassifierRegistry {
    path: Option<PathBuf>,
    by_synset: BTreeMap<SynsetId, MiniClassifier>,
}

impl ClassifierRegistry {
    /// Loads `path` (absent means empty) and keeps it attached.
    pub fn open(path: &Path) -> Result<Self, LearningError> {
        let mut by_synset = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|source| LearningError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let c = parse_classifier_line(line).map_err(|message| LearningError::Registry {
                    file: path.display().to_string(),
                    line: n + 1,
                    message,
                })?;
                by_synset.insert(c.virtual_synset.clone(), c);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            by_synset,
        })
    }

    pub fn get(&self, virtual_synset: &SynsetId) -> Option<&MiniClassifier> {
        self.by_synset.get(virtual_synset)
    }

    pub fn len(&self) -> usize {
        self.by_synset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_synset.is_empty()
    }

    /// Adds or replaces the classifier of its synset and rewrites the file.
    pub fn insert(&mut self, c: MiniClassifier) -> Result<(), LearningError> {
        self.by_synset.insert(c.virtual_synset.clone(), c);
        if let Some(path) = &self.path {
            let mut text: String = self.by_synset.values().map(|c| classifier_line(c) + "\n").collect();
            if text.is_empty() {
                text.push('\n');
            }
            write_atomic(path, text.as_bytes()).map_err(StoreError::from)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub candidate: Candidate,
    pub label: Label,
}

fn candidate_key(c: &Candidate) -> (String, u64, [u64; 4]) {
    (c.video_id.clone(), c.frame_index, c.bbox.sort_key())
}

pub fn load_labels(store: &Store, virtual_synset: &SynsetId) -> Result<Vec<LabelRecord>, LearningError> {
    let path = store.labels_path(virtual_synset.as_str());
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|source| LearningError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| LearningError::Registry {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Merges new labels into the stored set (a later label of the same crop
/// wins) and returns the stored count.
pub fn save_labels(store: &Store, virtual_synset: &SynsetId, labels: &[LabelRecord]) -> Result<usize, LearningError> {
    let mut merged: BTreeMap<(String, u64, [u64; 4]), LabelRecord> = load_labels(store, virtual_synset)?
        .into_iter()
        .map(|r| (candidate_key(&r.candidate), r))
        .collect();
    for r in labels {
        merged.insert(candidate_key(&r.candidate), r.clone());
    }
    let records: Vec<&LabelRecord> = merged.values().collect();
    let text = serde_json::to_string_pretty(&records).expect("labels serialize");
    write_atomic(&store.labels_path(virtual_synset.as_str()), text.as_bytes()).map_err(StoreError::from)?;
    Ok(records.len())
}

/// Features of a labeled crop set, read from the stored frames.
pub fn samples_from_labels(
    store: &Store,
    labels: &[LabelRecord],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<LabeledSample>, LearningError> {
    let mut frames: HashMap<(String, u64), ImageBuffer> = HashMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for r in labels {
        let c = &r.candidate;
        let key = (c.video_id.clone(), c.frame_index);
        if !frames.contains_key(&key) {
            frames.insert(key.clone(), store.load_frame(&c.video_id, c.frame_index)?);
        }
        out.push(LabeledSample {
            features: extractor.extract(&frames[&key], &c.bbox)?,
            label: r.label,
            provenance: Some(c.clone()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub graphs_total: usize,
    pub graphs_done: usize,
    pub crops_scored: usize,
    pub crops_accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReindexReport {
    /// Current version of every graph that holds the parent.
    pub versions: Vec<(String, u32)>,
    /// Graphs that received a new version.
    pub changed: Vec<String>,
    pub progress: Progress,
    pub failures: Vec<String>,
}

/// `graph` with the accepted crops attached as evidence of the virtual node
/// under its parent.
pub fn extend_graph(
    graph: &VideoKnowledgeGraph,
    virtual_synset: &SynsetId,
    parent: &SynsetId,
    accepted: &[Candidate],
) -> VideoKnowledgeGraph {
    let mut g = graph.clone();
    if accepted.is_empty() {
        return g;
    }
    let evidence = accepted
        .iter()
        .map(|c| (EvidenceKey::new(c.window, c.frame_index), BTreeSet::from([EvidenceKind::Classifier])))
        .collect();
    g.add_node(SynsetNode::direct(virtual_synset.clone(), evidence));
    g.add_chain(&[virtual_synset.clone(), parent.clone()]);
    g.propagate();
    g
}

fn reindex_video(
    store: &Store,
    graph: &VideoKnowledgeGraph,
    virtual_synset: &SynsetId,
    parent: &SynsetId,
    lexicon: &LexiconDb,
    classifier: &MiniClassifier,
    extractor: &dyn FeatureExtractor,
    progress: &mut Progress,
) -> Result<Option<VideoKnowledgeGraph>, LearningError> {
    let kb = store.load_kb(&graph.video_id)?;
    let mut accepted = Vec::new();
    let mut frames: HashMap<u64, ImageBuffer> = HashMap::new();
    for c in dedup_sorted(video_candidates(graph, &kb, parent, lexicon)) {
        if !frames.contains_key(&c.frame_index) {
            frames.insert(c.frame_index, store.load_frame(&c.video_id, c.frame_index)?);
        }
        let features = extractor.extract(&frames[&c.frame_index], &c.bbox)?;
        let (accept, _) = apply_classifier(&classifier.model, &features)?;
        progress.crops_scored += 1;
        if accept {
            progress.crops_accepted += 1;
            accepted.push(c);
        }
    }
    let g = extend_graph(graph, virtual_synset, parent, &accepted);
    Ok((&g != graph).then_some(g))
}

/// Scores the parent's evidence crops in every stored graph with the
/// virtual synset's classifier and writes a new graph version wherever the
/// virtual node gains evidence. A graph that fails is reported and skipped.
pub fn reindex(
    virtual_synset: &SynsetId,
    store: &Store,
    lexicon: &LexiconDb,
    classifier: &MiniClassifier,
    extractor: &dyn FeatureExtractor,
    mut on_progress: impl FnMut(Progress),
) -> Result<ReindexReport, LearningError> {
    let parent = lexicon
        .virtual_synset(virtual_synset)
        .ok_or_else(|| LearningError::UnknownVirtual(virtual_synset.clone()))?
        .parent;
    let mut report = ReindexReport::default();
    let videos = store.videos()?;
    report.progress.graphs_total = videos.len();
    on_progress(report.progress);
    for video in videos {
        let step = store
            .load_latest(&video, Some(lexicon))
            .map_err(LearningError::from)
            .and_then(|latest| {
                let Some((version, g)) = latest else {
                    return Ok(None);
                };
                if !g.contains(&parent) {
                    return Ok(None);
                }
                let updated = reindex_video(
                    store,
                    &g,
                    virtual_synset,
                    &parent,
                    lexicon,
                    classifier,
                    extractor,
                    &mut report.progress,
                )?;
                match updated {
                    Some(g2) => Ok(Some((store.put_graph(&g2)?, true))),
                    None => Ok(Some((version, false))),
                }
            });
        match step {
            Ok(Some((version, changed))) => {
                report.versions.push((video.clone(), version));
                if changed {
                    report.changed.push(video.clone());
                }
            }
            Ok(None) => {}
            Err(e) => {
                log::warn!("reindex {virtual_synset} on {video}: {e}");
                report.failures.push(format!("{video}: {e}"));
            }
        }
        report.progress.graphs_done += 1;
        on_progress(report.progress);
    }
    Ok(report)
}

/// Sample counts of a stored label set, checked before a job is queued.
pub fn check_labels(labels: &[LabelRecord]) -> Result<(), LearningError> {
    let positives = labels.iter().filter(|r| r.label == Label::Positive).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LearningError::SingleClass { positives, negatives });
    }
    Ok(())
}

/// Trains the virtual synset's classifier on its stored labels, registers it
/// and reindexes every stored graph.
pub fn train_virtual(
    virtual_synset: &SynsetId,
    store: &Store,
    lexicon: &LexiconDb,
    extractor: &dyn FeatureExtractor,
    options: &TrainOptions,
    on_progress: impl FnMut(Progress),
) -> Result<ReindexReport, LearningError> {
    if lexicon.virtual_synset(virtual_synset).is_none() {
        return Err(LearningError::UnknownVirtual(virtual_synset.clone()));
    }
    let labels = load_labels(store, virtual_synset)?;
    check_labels(&labels)?;
    let samples = samples_from_labels(store, &labels, extractor)?;
    let model = train_mini_classifier(&samples, options)?;
    let classifier = MiniClassifier::new(virtual_synset.clone(), model);
    let mut registry = ClassifierRegistry::open(&store.classifier_registry_path())?;
    registry.insert(classifier.clone())?;
    reindex(virtual_synset, store, lexicon, &classifier, extractor, on_progress)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub virtual_synset: SynsetId,
    pub status: JobStatus,
    pub progress: Progress,
    pub versions: Vec<(String, u32)>,
    pub failures: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
struct JobTable {
    jobs: BTreeMap<String, Job>,
    active: BTreeSet<SynsetId>,
    next: u64,
}

/// Runs jobs on background threads, one active job per virtual synset.
#[derive(Debug, Clone, Default)]
pub struct JobRunner {
    table: Arc<Mutex<JobTable>>,
}

/// A running job's view of its own record.
#[derive(Debug, Clone)]
pub struct JobHandle {
    id: String,
    table: Arc<Mutex<JobTable>>,
}

impl JobHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_progress(&self, p: Progress) {
        if let Some(j) = self.table.lock().unwrap_or_else(|e| e.into_inner()).jobs.get_mut(&self.id) {
            j.progress = p;
        }
    }
}

impl JobRunner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit<F>(&self, virtual_synset: SynsetId, work: F) -> Result<String, LearningError>
    where
        F: FnOnce(&JobHandle) -> Result<ReindexReport, String> + Send + 'static,
    {
        let id = {
            let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
            if t.active.contains(&virtual_synset) {
                return Err(LearningError::JobActive(virtual_synset));
            }
            t.next += 1;
            let id = format!("job-{:04}", t.next);
            t.active.insert(virtual_synset.clone());
            t.jobs.insert(
                id.clone(),
                Job {
                    id: id.clone(),
                    virtual_synset: virtual_synset.clone(),
                    status: JobStatus::Queued,
                    progress: Progress::default(),
                    versions: vec![],
                    failures: vec![],
                    error: None,
                },
            );
            id
        };
        let handle = JobHandle {
            id: id.clone(),
            table: self.table.clone(),
        };
        std::thread::spawn(move || {
            handle.update(|j| j.status = JobStatus::Running);
            let result = work(&handle);
            let mut t = handle.table.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(j) = t.jobs.get_mut(&handle.id) {
                match result {
                    Ok(r) => {
                        j.status = JobStatus::Done;
                        j.progress = r.progress;
                        j.versions = r.versions;
                        j.failures = r.failures;
                    }
                    Err(e) => {
                        j.status = JobStatus::Failed;
                        j.error = Some(e);
                    }
                }
            }
            t.active.remove(&virtual_synset);
        });
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.table.lock().unwrap_or_else(|e| e.into_inner()).jobs.get(id).cloned()
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.table.lock().unwrap_or_else(|e| e.into_inner()).jobs.values().cloned().collect()
    }

    /// Polls until the job finishes or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<Job> {
        let start = Instant::now();
        loop {
            let job = self.get(id)?;
            if matches!(job.status, JobStatus::Done | JobStatus::Failed) || start.elapsed() >= timeout {
                return Some(job);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl JobHandle {
    fn update(&self, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.table.lock().unwrap_or_else(|e| e.into_inner()).jobs.get_mut(&self.id) {
            f(j);
        }
    }
}
