//! Run configuration, the standard pipeline recipe and the end-to-end
//! ingest and graph-building steps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    caption_pipe, AdapterClient, AdapterEndpoint, AdapterError, GroundingPipe, HttpTransport, OcrPipe, StubManifest,
    StubTransport, TaggingPipe, TaskKind, Transport, TripletParserPipe, DEFAULT_CROP_PAD,
};
use crate::graph::video_to_kg;
use crate::kb::{pipeline_fingerprint, KbConsumer, KbError, VideoKnowledgeBase};
use crate::keyframe::{KMeansOptions, KeyframeConfig, KeyframeExtractor};
use crate::lexicon::{LexiconDb, LexiconError};
use crate::pipeline::{run_pipeline, spec_from_toml, Node, PipeRegistry, PipelineError, PipelineSpec};
use crate::relations::{ConcretenessLexicon, SentenceGraphPipe, DEFAULT_TAU};
use crate::segment::{
    build_paragraphs, generate_windows, parse_transcript, segment_sentences, SegmentError, SegmenterConfig,
    StaticFrameSource, TfCosineScorer, UniformSampler,
};
use crate::store::{Store, StoreError};
use crate::window::{keys, SlotPayload, TranscriptSegment};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn read(path: &Path) -> Result<String, RecipeError> {
    std::fs::read_to_string(path).map_err(|source| RecipeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeSettings {
    pub alpha: f64,
    pub max_k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KeyframeSettings {
    fn default() -> Self {
        let k = KeyframeConfig::default();
        Self {
            alpha: k.alpha,
            max_k: k.max_k,
            restarts: k.kmeans.restarts,
            max_iters: k.kmeans.max_iters,
            seed: k.kmeans.seed,
        }
    }
}

impl KeyframeSettings {
    pub fn to_config(&self) -> KeyframeConfig {
        KeyframeConfig {
            alpha: self.alpha,
            max_k: self.max_k,
            kmeans: KMeansOptions {
                max_iters: self.max_iters,
                restarts: self.restarts,
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationSettings {
    pub tau: f64,
    /// Concreteness ratings file; the shipped list when absent.
    pub concreteness: Option<PathBuf>,
}

impl Default for RelationSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            concreteness: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub stub_manifest: Option<PathBuf>,
    pub endpoints: Vec<AdapterEndpoint>,
    pub include_ocr_in_prompts: bool,
    pub crop_pad: f64,
    /// Parse triplets through the adapter instead of the rule parser.
    pub adapter_triplets: bool,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self {
            stub_manifest: None,
            endpoints: Vec::new(),
            include_ocr_in_prompts: false,
            crop_pad: DEFAULT_CROP_PAD,
            adapter_triplets: false,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub store: PathBuf,
    pub lexicon: Option<PathBuf>,
    /// Declarative pipeline spec; the standard recipe when absent.
    pub pipeline: Option<PathBuf>,
    /// Sampling rate of frames inside windows.
    pub fps: f64,
    pub segmenter: SegmenterConfig,
    pub keyframes: KeyframeSettings,
    pub relations: RelationSettings,
    pub adapters: AdapterSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("store"),
            lexicon: None,
            pipeline: None,
            fps: 1.0,
            segmenter: SegmenterConfig::default(),
            keyframes: KeyframeSettings::default(),
            relations: RelationSettings::default(),
            adapters: AdapterSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, RecipeError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RecipeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RecipeError> {
        let mut cfg = Self::parse(&read(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.store);
        for p in [
            &mut self.lexicon,
            &mut self.pipeline,
            &mut self.relations.concreteness,
            &mut self.adapters.stub_manifest,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), RecipeError> {
        let err = |m: String| Err(RecipeError::Config(m));
        self.segmenter.validate()?;
        if !(1.0..=5.0).contains(&self.relations.tau) {
            return err(format!("tau {} outside [1, 5]", self.relations.tau));
        }
        if !(self.keyframes.alpha > 0.0 && self.keyframes.alpha.is_finite()) {
            return err(format!("alpha {} must be positive", self.keyframes.alpha));
        }
        if self.keyframes.max_k == 0 || self.keyframes.restarts == 0 || self.keyframes.max_iters == 0 {
            return err("max_k, restarts and max_iters must be positive".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return err(format!("fps {} must be positive", self.fps));
        }
        if !(0.0..0.5).contains(&self.adapters.crop_pad) {
            return err(format!("crop_pad {} outside [0, 0.5)", self.adapters.crop_pad));
        }
        for ep in &self.adapters.endpoints {
            ep.validate()?;
        }
        Ok(())
    }

    /// Canonical text of the settings that shape a knowledge base.
    pub fn fingerprint_text(&self) -> String {
        serde_json::json!({
            "fps": self.fps,
            "segmenter": self.segmenter,
            "keyframes": self.keyframes,
            "tau": self.relations.tau,
            "include_ocr_in_prompts": self.adapters.include_ocr_in_prompts,
            "crop_pad": self.adapters.crop_pad,
            "adapter_triplets": self.adapters.adapter_triplets,
        })
        .to_string()
    }

    /// Loads the lexicon with the store's virtual registry attached.
    pub fn open_lexicon(&self, store: &Store) -> Result<LexiconDb, RecipeError> {
        let path = self
            .lexicon
            .as_ref()
            .ok_or_else(|| RecipeError::Config("no lexicon configured".into()))?;
        let lex = LexiconDb::load(path)?;
        lex.attach_virtual_registry(&store.virtual_registry_path())?;
        Ok(lex)
    }
}

/// One client per task kind.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub clients: BTreeMap<TaskKind, AdapterClient>,
}

impl AdapterSet {
    /// Every task served by the same transport.
    pub fn uniform(transport: Arc<dyn Transport>, address: &str) -> Result<Self, AdapterError> {
        let mut clients = BTreeMap::new();
        for task in TaskKind::ALL {
            clients.insert(task, AdapterClient::new(AdapterEndpoint::new(task, address), transport.clone())?);
        }
        Ok(Self { clients })
    }

    pub fn stub(manifest: &StubManifest) -> Result<Self, AdapterError> {
        Self::uniform(Arc::new(StubTransport::new(manifest)), "stub://")
    }

    pub fn http(endpoints: &[AdapterEndpoint]) -> Result<Self, AdapterError> {
        let mut clients = BTreeMap::new();
        for ep in endpoints {
            clients.insert(ep.task, AdapterClient::new(ep.clone(), Arc::new(HttpTransport))?);
        }
        Ok(Self { clients })
    }

    /// Stub manifest when configured (or given), live endpoints otherwise.
    pub fn from_settings(settings: &AdapterSettings, manifest_override: Option<&Path>) -> Result<Self, RecipeError> {
        match manifest_override.or(settings.stub_manifest.as_deref()) {
            Some(path) => Ok(Self::stub(&StubManifest::load(path)?)?),
            None if !settings.endpoints.is_empty() => Ok(Self::http(&settings.endpoints)?),
            None => Err(RecipeError::Config("no stub manifest and no adapter endpoints".into())),
        }
    }

    pub fn client(&self, task: TaskKind) -> Result<AdapterClient, RecipeError> {
        self.clients
            .get(&task)
            .cloned()
            .ok_or_else(|| RecipeError::Config(format!("no adapter endpoint for {task}")))
    }
}

fn concreteness(settings: &RelationSettings) -> Result<Arc<ConcretenessLexicon>, RecipeError> {
    Ok(Arc::new(match &settings.concreteness {
        Some(p) => ConcretenessLexicon::from_file(p).map_err(|e| RecipeError::Config(format!("{}: {e}", p.display())))?,
        None => ConcretenessLexicon::shipped().clone(),
    }))
}

/// Every pipe a declarative spec may name.
pub fn standard_registry(config: &RunConfig, adapters: &AdapterSet) -> Result<PipeRegistry, RecipeError> {
    let mut reg = PipeRegistry::new();
    reg.register(Arc::new(KeyframeExtractor {
        config: config.keyframes.to_config(),
    }));
    reg.register(Arc::new(TaggingPipe {
        client: adapters.client(TaskKind::Tag)?,
    }));
    reg.register(Arc::new(OcrPipe {
        client: adapters.client(TaskKind::Ocr)?,
    }));
    reg.register(Arc::new(GroundingPipe {
        client: adapters.client(TaskKind::Ground)?,
        include_ocr: config.adapters.include_ocr_in_prompts,
    }));
    reg.register(Arc::new(caption_pipe(adapters.client(TaskKind::Caption)?, config.adapters.crop_pad)));
    if let Ok(client) = adapters.client(TaskKind::ParseTriplets) {
        reg.register(Arc::new(TripletParserPipe { client }));
    }
    reg.register(Arc::new(SentenceGraphPipe::new(concreteness(&config.relations)?, config.relations.tau)));
    Ok(reg)
}

/// keyframes, then tagging and OCR side by side, grounding, crop captioning
/// and the sentence graph parser.
pub const STANDARD_RECIPE: &str = r#"
name = "standard"
variant = "sequential"
queue_capacity = 4

[[children]]
pipe = "keyframes"

[[children]]
name = "tag_ocr"
variant = "parallel"
children = [{ pipe = "tagger" }, { pipe = "ocr" }]

[[children]]
pipe = "grounding"

[[children]]
pipe = "captioner"

[[children]]
pipe = "sentence_graph"
"#;

/// The standard recipe with the adapter triplet parser ahead of the
/// sentence graph parser.
pub const ADAPTER_TRIPLETS_RECIPE: &str = r#"
name = "standard_adapter_triplets"
variant = "sequential"
queue_capacity = 4

[[children]]
pipe = "keyframes"

[[children]]
name = "tag_ocr"
variant = "parallel"
children = [{ pipe = "tagger" }, { pipe = "ocr" }]

[[children]]
pipe = "grounding"

[[children]]
pipe = "captioner"

[[children]]
pipe = "triplet_parser"

[[children]]
pipe = "sentence_graph"
"#;

pub fn build_spec(config: &RunConfig, adapters: &AdapterSet) -> Result<(PipelineSpec, String), RecipeError> {
    let registry = standard_registry(config, adapters)?;
    let text = match &config.pipeline {
        Some(p) => read(p)?,
        None if config.adapters.adapter_triplets => ADAPTER_TRIPLETS_RECIPE.to_string(),
        None => STANDARD_RECIPE.to_string(),
    };
    Ok((spec_from_toml(&text, &registry)?, text))
}

/// `video.toml` of a fixture bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub video_id: String,
    pub native_fps: f64,
    #[serde(default)]
    pub duration: Option<f64>,
}

/// A video stand-in: `video.toml`, `frames/<index>.png` and optionally
/// `transcript.json` and `stub_manifest.json`.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub root: PathBuf,
    pub meta: BundleMeta,
}

impl Bundle {
    pub fn open(root: &Path) -> Result<Self, RecipeError> {
        let meta: BundleMeta =
            toml::from_str(&read(&root.join("video.toml"))?).map_err(|e| RecipeError::Config(format!("video.toml: {e}")))?;
        if !(meta.native_fps > 0.0) {
            return Err(RecipeError::Config(format!("native_fps {} must be positive", meta.native_fps)));
        }
        crate::store::check_video_id(&meta.video_id)?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.root.join("transcript.json")
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    /// The bundle's own manifest, when it ships one.
    pub fn stub_manifest(&self) -> Option<PathBuf> {
        let p = self.root.join("stub_manifest.json");
        p.exists().then_some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub video_id: String,
    pub windows: usize,
    pub keyframes: usize,
    pub triplets: usize,
    pub failed_windows: Vec<u32>,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub kb: VideoKnowledgeBase,
    pub kb_path: PathBuf,
    pub summary: IngestSummary,
}

/// Bundle to knowledge base: segmentation, windows, the pipeline, the KB
/// consumer. Keyframe images and the KB land in the store.
pub fn ingest(
    bundle: &Bundle,
    config: &RunConfig,
    adapters: &AdapterSet,
    store: &Store,
    created_at: &str,
) -> Result<IngestOutcome, RecipeError> {
    config.validate()?;
    let video_id = bundle.meta.video_id.clone();
    let source = StaticFrameSource::from_dir(&video_id, &bundle.frames_dir(), bundle.meta.native_fps, bundle.meta.duration)
        .map_err(|source| RecipeError::Io {
            path: bundle.frames_dir(),
            source,
        })?;
    let paragraphs = if bundle.transcript_path().exists() {
        let t = parse_transcript(&read(&bundle.transcript_path())?)?;
        if t.video_id != video_id {
            return Err(RecipeError::Config(format!(
                "transcript is for {:?}, bundle is {video_id:?}",
                t.video_id
            )));
        }
        build_paragraphs(&segment_sentences(&t.words), &config.segmenter, &TfCosineScorer)
    } else {
        log::info!("{video_id}: no transcript, segmenting frames only");
        Vec::new()
    };
    let windows = generate_windows(
        Arc::new(source),
        paragraphs,
        Arc::new(UniformSampler { fps: config.fps }),
        &config.segmenter,
    );
    let transcripts: Arc<Mutex<BTreeMap<u32, TranscriptSegment>>> = Arc::default();
    let seen = transcripts.clone();
    let windows = windows.inspect(move |w| {
        seen.lock().expect("transcript map").insert(w.index(), w.transcript().clone());
    });

    let (spec, spec_text) = build_spec(config, adapters)?;
    let stage_names: Vec<String> = spec.children.iter().map(node_name).collect();
    let stage_refs: Vec<&str> = stage_names.iter().map(String::as_str).collect();
    let fingerprint = pipeline_fingerprint(&stage_refs, &format!("{}\n{}", config.fingerprint_text(), spec_text));
    let (outputs, failures) = run_pipeline(Arc::new(spec), windows)?.collect_all();

    let mut by_index: BTreeMap<u32, _> = outputs.into_iter().map(|w| (w.index(), w)).collect();
    let transcripts = std::mem::take(&mut *transcripts.lock().expect("transcript map"));
    let mut consumer = KbConsumer::new(&video_id, fingerprint, created_at);
    let mut failed = Vec::new();
    for (index, transcript) in &transcripts {
        match by_index.remove(index) {
            Some(w) => {
                if let Some(SlotPayload::Keyframes(sel)) = w.slot(keys::KEYFRAMES).map(|s| &s.payload) {
                    for k in &sel.keyframes {
                        if let Some(f) = w.frame(k.frame.frame_index) {
                            store.put_frame(&video_id, k.frame.frame_index, &*f.image.load()?)?;
                        }
                    }
                }
                consumer.consume(&w)?;
            }
            None => {
                failed.push(*index);
                consumer.skip(&video_id, *index, transcript)?;
            }
        }
    }
    for f in &failures {
        log::warn!("{f}");
    }
    let kb = consumer.finish()?;
    let kb_path = store.put_kb(&kb)?;
    let summary = IngestSummary {
        video_id,
        windows: kb.windows.len(),
        keyframes: kb.windows.iter().map(|w| w.keyframes.len()).sum(),
        triplets: kb.windows.iter().flat_map(|w| &w.keyframes).map(|f| f.triplets.len()).sum(),
        failed_windows: failed,
    };
    Ok(IngestOutcome { kb, kb_path, summary })
}

impl From<crate::window::ImageError> for RecipeError {
    fn from(e: crate::window::ImageError) -> Self {
        RecipeError::Store(StoreError::Image(e))
    }
}

fn node_name(n: &Node) -> String {
    match n {
        Node::Pipe(p) | Node::Batched { pipe: p, .. } => p.name().to_string(),
        Node::Pipeline(s) => s.name.clone(),
    }
}

/// Builds the graph of a stored knowledge base and stores it as a new
/// version.
pub fn build_kg(store: &Store, lexicon: &LexiconDb, video_id: &str) -> Result<(u32, crate::graph::VideoKnowledgeGraph), RecipeError> {
    let kb = store.load_kb(video_id)?;
    let g = video_to_kg(&kb, lexicon);
    let version = store.put_graph(&g)?;
    Ok((version, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_ranges() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.segmenter.coherency_threshold, 0.15);
        assert_eq!(cfg.relations.tau, 3.0);
        assert_eq!(cfg.keyframes.alpha, 0.02);
        for bad in [
            "[segmenter]\ncoherency_threshold = 1.5",
            "[relations]\ntau = 0.5",
            "[keyframes]\nalpha = 0.0",
            "fps = 0.0",
            "unknown = 1",
            "[[adapters.endpoints]]\ntask = \"tag\"\naddress = \"http://x\"\ntimeout_ms = 0",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::parse("store = \"s\"\nlexicon = \"/abs/lex.txt\"\n[adapters]\nstub_manifest = \"m.json\"").unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.store, Path::new("/cfg/s"));
        assert_eq!(cfg.lexicon.as_deref(), Some(Path::new("/abs/lex.txt")));
        assert_eq!(cfg.adapters.stub_manifest.as_deref(), Some(Path::new("/cfg/m.json")));
    }

    #[test]
    fn standard_recipe_builds() {
        let adapters = AdapterSet::stub(&StubManifest::default()).unwrap();
        let (spec, _) = build_spec(&RunConfig::default(), &adapters).unwrap();
        let names: Vec<String> = spec.children.iter().map(node_name).collect();
        assert_eq!(names, ["keyframes", "tag_ocr", "grounding", "captioner", "sentence_graph"]);
        let cfg = RunConfig {
            adapters: AdapterSettings {
                adapter_triplets: true,
                ..AdapterSettings::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(build_spec(&cfg, &adapters).unwrap().0.children.len(), 6);
    }
}
