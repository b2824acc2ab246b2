//! On-disk store of knowledge bases, versioned graphs and keyframe images.
//!
//! ```text
//! <root>/kb/<video>.json
//! <root>/graphs/<video>/v0001.json
//! <root>/frames/<video>/<frame_index>.png
//! <root>/virtual_synsets.txt
//! <root>/classifiers.txt
//! <root>/labels/<virtual synset>.json
//! ```
//!
//! Graph versions are immutable files written atomically, so a reader always
//! sees either the old or the new version of a graph.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::graph::{GraphError, VideoKnowledgeGraph};
use crate::kb::{load_kb, write_atomic, write_kb, KbError, VideoKnowledgeBase};
use crate::lexicon::LexiconDb;
use crate::window::{ImageBuffer, ImageError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid video id {0:?}")]
    InvalidVideoId(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Video ids become path components: ASCII letters, digits, `_`, `-`, `.`,
/// not starting with a dot.
pub fn check_video_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidVideoId(id.to_string()))
    }
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl Store {
    /// Opens a store, creating its directories.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["kb", "graphs", "frames", "labels"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn virtual_registry_path(&self) -> PathBuf {
        self.root.join("virtual_synsets.txt")
    }

    pub fn classifier_registry_path(&self) -> PathBuf {
        self.root.join("classifiers.txt")
    }

    pub fn labels_path(&self, virtual_synset: &str) -> PathBuf {
        self.root.join("labels").join(format!("{virtual_synset}.json"))
    }

    pub fn kb_path(&self, video_id: &str) -> Result<PathBuf, StoreError> {
        check_video_id(video_id)?;
        Ok(self.root.join("kb").join(format!("{video_id}.json")))
    }

    fn graph_dir(&self, video_id: &str) -> Result<PathBuf, StoreError> {
        check_video_id(video_id)?;
        Ok(self.root.join("graphs").join(video_id))
    }

    pub fn graph_path(&self, video_id: &str, version: u32) -> Result<PathBuf, StoreError> {
        Ok(self.graph_dir(video_id)?.join(format!("v{version:04}.json")))
    }

    pub fn frame_path(&self, video_id: &str, frame_index: u64) -> Result<PathBuf, StoreError> {
        check_video_id(video_id)?;
        Ok(self.root.join("frames").join(video_id).join(format!("{frame_index}.png")))
    }

    pub fn put_kb(&self, kb: &VideoKnowledgeBase) -> Result<PathBuf, StoreError> {
        let path = self.kb_path(&kb.video_id)?;
        write_kb(kb, &path)?;
        Ok(path)
    }

    pub fn load_kb(&self, video_id: &str) -> Result<VideoKnowledgeBase, StoreError> {
        let path = self.kb_path(video_id)?;
        if !path.exists() {
            return Err(StoreError::NotFound(format!("kb of {video_id}")));
        }
        Ok(load_kb(&path)?)
    }

    pub fn put_frame(&self, video_id: &str, frame_index: u64, image: &ImageBuffer) -> Result<PathBuf, StoreError> {
        let path = self.frame_path(video_id, frame_index)?;
        let dir = path.parent().expect("frame path has a parent");
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        write_atomic(&path, &image.to_png_bytes()?)?;
        Ok(path)
    }

    pub fn load_frame(&self, video_id: &str, frame_index: u64) -> Result<ImageBuffer, StoreError> {
        let path = self.frame_path(video_id, frame_index)?;
        if !path.exists() {
            return Err(StoreError::NotFound(format!("frame {frame_index} of {video_id}")));
        }
        Ok(ImageBuffer::open(&path)?)
    }

    /// Videos with at least one graph version, sorted.
    pub fn videos(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("graphs");
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io(&dir))? {
            let entry = entry.map_err(io(&dir))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if check_video_id(&name).is_ok() && !self.versions(&name)?.is_empty() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Graph versions of a video, ascending.
    pub fn versions(&self, video_id: &str) -> Result<Vec<u32>, StoreError> {
        let dir = self.graph_dir(video_id)?;
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io(&dir))? {
            let name = entry.map_err(io(&dir))?.file_name().to_string_lossy().to_string();
            if let Some(v) = name
                .strip_prefix('v')
                .and_then(|r| r.strip_suffix(".json"))
                .and_then(|n| n.parse::<u32>().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn latest_version(&self, video_id: &str) -> Result<Option<u32>, StoreError> {
        Ok(self.versions(video_id)?.last().copied())
    }

    /// Writes the next version of `graph.video_id` and returns its number.
    pub fn put_graph(&self, graph: &VideoKnowledgeGraph) -> Result<u32, StoreError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.graph_dir(&graph.video_id)?;
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let version = self.latest_version(&graph.video_id)?.unwrap_or(0) + 1;
        write_atomic(&self.graph_path(&graph.video_id, version)?, graph.to_json().as_bytes())?;
        Ok(version)
    }

    pub fn load_graph(
        &self,
        video_id: &str,
        version: u32,
        lexicon: Option<&LexiconDb>,
    ) -> Result<VideoKnowledgeGraph, StoreError> {
        let path = self.graph_path(video_id, version)?;
        if !path.exists() {
            return Err(StoreError::NotFound(format!("graph v{version} of {video_id}")));
        }
        Ok(VideoKnowledgeGraph::load(&path, lexicon)?)
    }

    pub fn load_latest(
        &self,
        video_id: &str,
        lexicon: Option<&LexiconDb>,
    ) -> Result<Option<(u32, VideoKnowledgeGraph)>, StoreError> {
        match self.latest_version(video_id)? {
            Some(v) => Ok(Some((v, self.load_graph(video_id, v, lexicon)?))),
            None => Ok(None),
        }
    }

    /// Latest graph of every video, in video id order.
    pub fn latest_graphs(&self, lexicon: Option<&LexiconDb>) -> Result<Vec<(u32, VideoKnowledgeGraph)>, StoreError> {
        let mut out = Vec::new();
        for v in self.videos()? {
            if let Some(g) = self.load_latest(&v, lexicon)? {
                out.push(g);
            }
        }
        Ok(out)
    }
}
