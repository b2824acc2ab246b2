//! WordNet-style lexical database: synset lookup, hypernym traversal, lowest
//! common hypernym, simplified Lesk and user-defined virtual synsets.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{OnceLock, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::{content_words, Bag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pos {
    #[serde(rename = "n")]
    Noun,
    #[serde(rename = "v")]
    Verb,
}

impl Pos {
    pub fn as_char(self) -> char {
        match self {
            Pos::Noun => 'n',
            Pos::Verb => 'v',
        }
    }

    pub fn from_code(code: &str) -> Option<Pos> {
        match code {
            "n" => Some(Pos::Noun),
            "v" => Some(Pos::Verb),
            _ => None,
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("hypernym cycle through {0}")]
    Cycle(String),
    #[error("invalid synset id {0:?}")]
    InvalidId(String),
    #[error("unknown synset {0}")]
    UnknownSynset(String),
    #[error("unknown lemma {lemma:?} ({pos})")]
    UnknownLemma { lemma: String, pos: Pos },
    #[error("virtual synset {0} already exists")]
    DuplicateName(String),
    #[error("parent synset {0} not found")]
    ParentNotFound(String),
    #[error("parent synset {0} is virtual")]
    ParentVirtual(String),
    #[error("invalid virtual synset name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `lemma.pos.NN`, or `slug.virtual.pos.NN` for virtual synsets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SynsetId {
    raw: String,
    pos: Pos,
    virtual_: bool,
}

impl SynsetId {
    pub fn parse(s: &str) -> Result<SynsetId, LexiconError> {
        let bad = || LexiconError::InvalidId(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() < 3 {
            return Err(bad());
        }
        let sense = parts[parts.len() - 1];
        if sense.len() < 2 || !sense.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let pos = Pos::from_code(parts[parts.len() - 2]).ok_or_else(bad)?;
        let virtual_ = parts.len() >= 4 && parts[parts.len() - 3] == "virtual";
        let lemma_parts = if virtual_ { &parts[..parts.len() - 3] } else { &parts[..parts.len() - 2] };
        if lemma_parts.join(".").is_empty() || s.chars().any(|c| c.is_whitespace() || c == '|') {
            return Err(bad());
        }
        Ok(SynsetId {
            raw: s.to_string(),
            pos,
            virtual_,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn pos(&self) -> Pos {
        self.pos
    }

    pub fn is_virtual(&self) -> bool {
        self.virtual_
    }

    pub fn lemma(&self) -> &str {
        let cut = if self.virtual_ { 3 } else { 2 };
        let mut end = self.raw.len();
        for _ in 0..cut {
            end = self.raw[..end].rfind('.').unwrap();
        }
        &self.raw[..end]
    }
}

impl fmt::Display for SynsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl FromStr for SynsetId {
    type Err = LexiconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SynsetId::parse(s)
    }
}

impl TryFrom<String> for SynsetId {
    type Error = LexiconError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        SynsetId::parse(&s)
    }
}

impl From<SynsetId> for String {
    fn from(id: SynsetId) -> String {
        id.raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synset {
    pub id: SynsetId,
    pub lemmas: Vec<String>,
    pub gloss: String,
    pub hypernyms: Vec<SynsetId>,
    pub hyponyms: Vec<SynsetId>,
    /// Shortest hypernym path length to a root.
    pub depth: u32,
    /// Longest hypernym path length to a root; ranks common ancestors.
    pub max_depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualSynset {
    pub id: SynsetId,
    pub parent: SynsetId,
    pub name: String,
    pub classifier_ref: String,
    pub created_at: String,
}

impl VirtualSynset {
    fn to_line(&self) -> String {
        format!("{}|{}|{}|{}|{}", self.id, self.parent, self.name, self.classifier_ref, self.created_at)
    }
}

#[derive(Debug, Default)]
struct VirtualRegistry {
    synsets: BTreeMap<SynsetId, VirtualSynset>,
    path: Option<PathBuf>,
}

/// Lowercase slug with runs of other characters collapsed to `_`.
pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Normalized lemma key: lowercase, spaces to underscores.
pub fn lemma_key(word: &str) -> String {
    word.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("_")
}

#[derive(Debug, Default)]
pub struct LexiconDb {
    synsets: BTreeMap<SynsetId, Synset>,
    index: HashMap<(String, Pos), Vec<SynsetId>>,
    exceptions: HashMap<(String, Pos), Vec<String>>,
    roots: BTreeMap<Pos, Vec<SynsetId>>,
    virtuals: RwLock<VirtualRegistry>,
    fingerprint: OnceLock<String>,
}

struct RawSynset {
    id: SynsetId,
    lemmas: Vec<String>,
    gloss: String,
    hypernyms: Vec<SynsetId>,
}

impl LexiconDb {
    /// Loads either a WordNet database directory or a fixture file.
    pub fn load(path: &Path) -> Result<LexiconDb, LexiconError> {
        if path.is_dir() {
            Self::load_wordnet(path)
        } else {
            Self::parse_fixture(&std::fs::read_to_string(path)?, &path.display().to_string())
        }
    }

    /// Fixture lines: `id|lemma,lemma|gloss|hypernym,hypernym`. File order is
    /// sense order.
    pub fn parse_fixture(text: &str, file: &str) -> Result<LexiconDb, LexiconError> {
        let mut raws = Vec::new();
        let mut lines = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| LexiconError::Parse {
                file: file.to_string(),
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let id = SynsetId::parse(fields[0].trim()).map_err(|e| err(e.to_string()))?;
            if id.is_virtual() {
                return Err(err("virtual ids belong in the virtual registry".into()));
            }
            let lemmas: Vec<String> = fields[1].split(',').map(lemma_key).filter(|l| !l.is_empty()).collect();
            if lemmas.is_empty() {
                return Err(err("no lemmas".into()));
            }
            let hypernyms = fields[3]
                .split(',')
                .map(str::trim)
                .filter(|h| !h.is_empty())
                .map(|h| SynsetId::parse(h).map_err(|e| err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            if lines.insert(id.clone(), n + 1).is_some() {
                return Err(err(format!("duplicate synset {id}")));
            }
            raws.push(RawSynset {
                id,
                lemmas,
                gloss: fields[2].trim().to_string(),
                hypernyms,
            });
        }
        for r in &raws {
            for h in &r.hypernyms {
                if !lines.contains_key(h) || h.pos() != r.id.pos() {
                    return Err(LexiconError::Parse {
                        file: file.to_string(),
                        line: lines[&r.id],
                        message: format!("unknown hypernym {h}"),
                    });
                }
            }
        }
        Self::build(raws, HashMap::new(), None)
    }

    /// Reads `index.{noun,verb}`, `data.{noun,verb}` and, when present,
    /// `{noun,verb}.exc` from a WordNet 3.x database directory.
    pub fn load_wordnet(dir: &Path) -> Result<LexiconDb, LexiconError> {
        let mut raws = Vec::new();
        let mut exceptions = HashMap::new();
        let mut sense_index = HashMap::new();
        for (pos, suffix) in [(Pos::Noun, "noun"), (Pos::Verb, "verb")] {
            let index_file = dir.join(format!("index.{suffix}"));
            let data_file = dir.join(format!("data.{suffix}"));
            let index = parse_wordnet_index(&std::fs::read_to_string(&index_file)?, &index_file.display().to_string())?;
            let (parsed, ids) = parse_wordnet_data(
                &std::fs::read_to_string(&data_file)?,
                &data_file.display().to_string(),
                pos,
                &index,
            )?;
            raws.extend(parsed);
            for (lemma, offsets) in index {
                let senses: Vec<SynsetId> = offsets.iter().filter_map(|o| ids.get(o).cloned()).collect();
                sense_index.insert((lemma, pos), senses);
            }
            let exc = dir.join(format!("{suffix}.exc"));
            if exc.exists() {
                for line in std::fs::read_to_string(&exc)?.lines() {
                    let mut words = line.split_whitespace();
                    if let Some(inflected) = words.next() {
                        exceptions.insert((inflected.to_string(), pos), words.map(str::to_string).collect());
                    }
                }
            }
        }
        Self::build(raws, exceptions, Some(sense_index))
    }

    fn build(
        raws: Vec<RawSynset>,
        exceptions: HashMap<(String, Pos), Vec<String>>,
        sense_index: Option<HashMap<(String, Pos), Vec<SynsetId>>>,
    ) -> Result<LexiconDb, LexiconError> {
        let mut synsets: BTreeMap<SynsetId, Synset> = BTreeMap::new();
        let mut index: HashMap<(String, Pos), Vec<SynsetId>> = HashMap::new();
        for r in raws {
            if sense_index.is_none() {
                for l in &r.lemmas {
                    let entry = index.entry((l.clone(), r.id.pos())).or_default();
                    if !entry.contains(&r.id) {
                        entry.push(r.id.clone());
                    }
                }
            }
            let mut hypernyms = r.hypernyms;
            hypernyms.sort();
            hypernyms.dedup();
            synsets.insert(
                r.id.clone(),
                Synset {
                    id: r.id,
                    lemmas: r.lemmas,
                    gloss: r.gloss,
                    hypernyms,
                    hyponyms: vec![],
                    depth: 0,
                    max_depth: 0,
                },
            );
        }
        let links: Vec<(SynsetId, SynsetId)> = synsets
            .values()
            .flat_map(|s| s.hypernyms.iter().map(move |h| (h.clone(), s.id.clone())))
            .collect();
        for (parent, child) in links {
            if let Some(p) = synsets.get_mut(&parent) {
                p.hyponyms.push(child);
            }
        }
        for s in synsets.values_mut() {
            s.hyponyms.sort();
        }
        check_acyclic(&synsets)?;
        if let Some(si) = sense_index {
            index = si;
        }
        let mut roots: BTreeMap<Pos, Vec<SynsetId>> = BTreeMap::new();
        for s in synsets.values() {
            if s.hypernyms.is_empty() {
                roots.entry(s.id.pos()).or_default().push(s.id.clone());
            }
        }
        // depth = BFS distance from the nearest root along hyponym links
        let mut depth: HashMap<SynsetId, u32> = HashMap::new();
        let mut queue: VecDeque<SynsetId> = VecDeque::new();
        for r in roots.values().flatten() {
            depth.insert(r.clone(), 0);
            queue.push_back(r.clone());
        }
        while let Some(id) = queue.pop_front() {
            let d = depth[&id];
            for c in &synsets[&id].hyponyms {
                if !depth.contains_key(c) {
                    depth.insert(c.clone(), d + 1);
                    queue.push_back(c.clone());
                }
            }
        }
        let mut longest: HashMap<SynsetId, u32> = HashMap::new();
        for id in synsets.keys() {
            longest_path(id, &synsets, &mut longest);
        }
        for s in synsets.values_mut() {
            s.depth = depth[&s.id];
            s.max_depth = longest[&s.id];
        }
        Ok(LexiconDb {
            synsets,
            index,
            exceptions,
            roots,
            virtuals: RwLock::new(VirtualRegistry::default()),
            fingerprint: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn get(&self, id: &SynsetId) -> Option<&Synset> {
        self.synsets.get(id)
    }

    pub fn synsets(&self) -> impl Iterator<Item = &Synset> {
        self.synsets.values()
    }

    pub fn contains(&self, id: &SynsetId) -> bool {
        self.synsets.contains_key(id) || (id.is_virtual() && self.virtual_synset(id).is_some())
    }

    pub fn roots(&self, pos: Pos) -> &[SynsetId] {
        self.roots.get(&pos).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The single root of a part of speech, if it has exactly one.
    pub fn designated_root(&self, pos: Pos) -> Option<&SynsetId> {
        match self.roots(pos) {
            [r] => Some(r),
            _ => None,
        }
    }

    /// Real synsets of a lemma in sense order.
    pub fn synsets_of(&self, lemma: &str, pos: Pos) -> Vec<&Synset> {
        self.index
            .get(&(lemma_key(lemma), pos))
            .map(|ids| ids.iter().map(|id| &self.synsets[id]).collect())
            .unwrap_or_default()
    }

    pub fn has_lemma(&self, lemma: &str, pos: Pos) -> bool {
        self.index.contains_key(&(lemma_key(lemma), pos))
    }

    /// Base forms of an inflected word that exist in the index, best first.
    pub fn morphy(&self, word: &str, pos: Pos) -> Vec<String> {
        let word = lemma_key(word);
        let mut out: Vec<String> = Vec::new();
        let push = |w: String, out: &mut Vec<String>| {
            if self.has_lemma(&w, pos) && !out.contains(&w) {
                out.push(w);
            }
        };
        if let Some(bases) = self.exceptions.get(&(word.clone(), pos)) {
            for b in bases {
                push(b.clone(), &mut out);
            }
        }
        push(word.clone(), &mut out);
        let rules: &[(&str, &str)] = match pos {
            Pos::Noun => &[("ses", "s"), ("xes", "x"), ("zes", "z"), ("ches", "ch"), ("shes", "sh"), ("men", "man"), ("ies", "y"), ("s", "")],
            Pos::Verb => &[("ies", "y"), ("es", "e"), ("es", ""), ("ed", "e"), ("ed", ""), ("ing", "e"), ("ing", ""), ("s", "")],
        };
        for (suffix, replacement) in rules {
            if let Some(stem) = word.strip_suffix(suffix) {
                if stem.is_empty() {
                    continue;
                }
                push(format!("{stem}{replacement}"), &mut out);
                // doubled final consonant: running -> run, stopped -> stop
                if replacement.is_empty() && pos == Pos::Verb {
                    let b = stem.as_bytes();
                    if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
                        push(stem[..stem.len() - 1].to_string(), &mut out);
                    }
                }
            }
        }
        out
    }

    /// Every ancestor-or-self of a real synset with its shortest distance.
    pub fn ancestors(&self, id: &SynsetId) -> BTreeMap<SynsetId, u32> {
        let mut out = BTreeMap::new();
        let mut queue = VecDeque::new();
        if self.synsets.contains_key(id) {
            out.insert(id.clone(), 0);
            queue.push_back(id.clone());
        }
        while let Some(cur) = queue.pop_front() {
            let d = out[&cur];
            for h in &self.synsets[&cur].hypernyms {
                if !out.contains_key(h) {
                    out.insert(h.clone(), d + 1);
                    queue.push_back(h.clone());
                }
            }
        }
        out
    }

    /// Virtual ids map to their real parent; real ids map to themselves.
    pub fn resolve_real(&self, id: &SynsetId) -> Option<SynsetId> {
        if id.is_virtual() {
            self.virtual_synset(id).map(|v| v.parent)
        } else {
            self.synsets.contains_key(id).then(|| id.clone())
        }
    }

    /// Shortest-path depth of a real or virtual synset (a virtual sits one
    /// below its parent).
    pub fn depth(&self, id: &SynsetId) -> Option<u32> {
        if id.is_virtual() {
            let parent = self.virtual_synset(id)?.parent;
            Some(self.synsets.get(&parent)?.depth + 1)
        } else {
            self.synsets.get(id).map(|s| s.depth)
        }
    }

    /// Deepest common ancestor-or-self by longest root path (a shortest-path
    /// depth can rank an ancestor below its own hyponym under multiple
    /// inheritance); ties go to the smaller id. Without
    /// any common ancestor the designated root of the part of speech is
    /// returned when there is one.
    pub fn lowest_common_hypernym(&self, a: &SynsetId, b: &SynsetId) -> Option<SynsetId> {
        let a = self.resolve_real(a)?;
        let b = self.resolve_real(b)?;
        if a.pos() != b.pos() {
            return None;
        }
        let anc_a = self.ancestors(&a);
        let anc_b = self.ancestors(&b);
        let mut best: Option<(&SynsetId, u32)> = None;
        for id in anc_a.keys().filter(|id| anc_b.contains_key(*id)) {
            let d = self.synsets[id].max_depth;
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((id, d));
            }
        }
        match best {
            Some((id, _)) => Some(id.clone()),
            None => self.designated_root(a.pos()).cloned(),
        }
    }

    /// Shortest hypernym path from `from` up to `to` (both included).
    /// Parents are explored in id order, so among equally short paths the
    /// lexicographically smallest one is returned.
    pub fn hypernym_path(&self, from: &SynsetId, to: &SynsetId) -> Option<Vec<SynsetId>> {
        let mut pred: BTreeMap<SynsetId, Option<SynsetId>> = BTreeMap::new();
        let mut queue = VecDeque::new();
        self.synsets.get(from)?;
        pred.insert(from.clone(), None);
        queue.push_back(from.clone());
        while let Some(cur) = queue.pop_front() {
            if &cur == to {
                let mut path = vec![cur.clone()];
                let mut at = cur;
                while let Some(Some(p)) = pred.get(&at) {
                    path.push(p.clone());
                    at = p.clone();
                }
                path.reverse();
                return Some(path);
            }
            for h in &self.synsets[&cur].hypernyms {
                if !pred.contains_key(h) {
                    pred.insert(h.clone(), Some(cur.clone()));
                    queue.push_back(h.clone());
                }
            }
        }
        None
    }

    /// Path from a synset to a root, always stepping to the shallowest parent
    /// (smaller id on ties).
    pub fn root_chain(&self, from: &SynsetId) -> Vec<SynsetId> {
        let mut out = Vec::new();
        let mut cur = match self.synsets.get(from) {
            Some(s) => s,
            None => return out,
        };
        out.push(cur.id.clone());
        while let Some(next) = cur.hypernyms.iter().map(|h| &self.synsets[h]).min_by(|x, y| x.depth.cmp(&y.depth).then(x.id.cmp(&y.id))) {
            out.push(next.id.clone());
            cur = next;
        }
        out
    }

    /// Words of a sense signature: gloss content words plus lemma words.
    pub fn signature(&self, synset: &Synset) -> Bag {
        let mut bag = Bag::new();
        bag.extend_text(&synset.gloss);
        for l in &synset.lemmas {
            for w in content_words(&l.replace('_', " ")) {
                bag.add(w);
            }
        }
        bag
    }

    /// Simplified Lesk: the candidate sense whose signature overlaps the
    /// context most; ties and zero overlap go to the earliest sense.
    pub fn lesk_disambiguate(&self, lemma: &str, pos: Pos, context: &Bag) -> Result<SynsetId, LexiconError> {
        let candidates = self.synsets_of(lemma, pos);
        let first = candidates.first().ok_or_else(|| LexiconError::UnknownLemma {
            lemma: lemma.to_string(),
            pos,
        })?;
        let mut best = (first.id.clone(), 0usize);
        for s in &candidates {
            let overlap = self.signature(s).intersection_size(context);
            if overlap > best.1 {
                best = (s.id.clone(), overlap);
            }
        }
        Ok(best.0)
    }

    /// Stable hash of the real synsets, their lemmas, glosses and hypernyms.
    pub fn fingerprint(&self) -> String {
        self.fingerprint
            .get_or_init(|| {
                let mut h = Sha256::new();
                for s in self.synsets.values() {
                    let hyper: Vec<&str> = s.hypernyms.iter().map(SynsetId::as_str).collect();
                    h.update(format!("{}|{}|{}|{}\n", s.id, s.lemmas.join(","), s.gloss, hyper.join(",")));
                }
                hex::encode(h.finalize())
            })
            .clone()
    }

    fn registry(&self) -> RwLockReadGuard<'_, VirtualRegistry> {
        self.virtuals.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn virtual_synset(&self, id: &SynsetId) -> Option<VirtualSynset> {
        self.registry().synsets.get(id).cloned()
    }

    pub fn virtual_synsets(&self) -> Vec<VirtualSynset> {
        self.registry().synsets.values().cloned().collect()
    }

    /// Virtual synsets attached directly under `parent`.
    pub fn virtual_children(&self, parent: &SynsetId) -> Vec<SynsetId> {
        self.registry()
            .synsets
            .values()
            .filter(|v| &v.parent == parent)
            .map(|v| v.id.clone())
            .collect()
    }

    /// Real hyponyms followed by virtual children.
    pub fn hyponyms(&self, id: &SynsetId) -> Vec<SynsetId> {
        let mut out = self.synsets.get(id).map(|s| s.hyponyms.clone()).unwrap_or_default();
        out.extend(self.virtual_children(id));
        out
    }

    /// Finds a virtual synset whose name slug equals `slug`.
    pub fn virtual_by_slug(&self, slug: &str) -> Option<VirtualSynset> {
        self.registry().synsets.values().find(|v| slugify(&v.name) == slug).cloned()
    }

    /// Registers `slug(name).virtual.pos.01` under a real parent and appends
    /// it to the registry file when one is attached.
    pub fn register_virtual(
        &self,
        parent: &SynsetId,
        name: &str,
        classifier_ref: &str,
        created_at: &str,
    ) -> Result<VirtualSynset, LexiconError> {
        if parent.is_virtual() {
            return Err(LexiconError::ParentVirtual(parent.to_string()));
        }
        if !self.synsets.contains_key(parent) {
            return Err(LexiconError::ParentNotFound(parent.to_string()));
        }
        let slug = slugify(name);
        if slug.is_empty() || [name, classifier_ref, created_at].iter().any(|f| f.contains(['|', '\n'])) {
            return Err(LexiconError::InvalidName(name.to_string()));
        }
        let id = SynsetId::parse(&format!("{slug}.virtual.{}.01", parent.pos()))?;
        let v = VirtualSynset {
            id: id.clone(),
            parent: parent.clone(),
            name: name.trim().to_string(),
            classifier_ref: classifier_ref.to_string(),
            created_at: created_at.to_string(),
        };
        let mut reg = self.virtuals.write().unwrap_or_else(|e| e.into_inner());
        if reg.synsets.contains_key(&id) {
            return Err(LexiconError::DuplicateName(id.to_string()));
        }
        if let Some(path) = &reg.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", v.to_line())?;
        }
        reg.synsets.insert(id, v.clone());
        Ok(v)
    }

    /// Loads (creating if absent) a registry file and keeps it attached so
    /// later registrations are persisted.
    pub fn attach_virtual_registry(&self, path: &Path) -> Result<usize, LexiconError> {
        let mut loaded = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (n, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let err = |message: String| LexiconError::Parse {
                    file: path.display().to_string(),
                    line: n + 1,
                    message,
                };
                let f: Vec<&str> = line.split('|').collect();
                if f.len() != 5 {
                    return Err(err(format!("expected 5 fields, found {}", f.len())));
                }
                let id = SynsetId::parse(f[0]).map_err(|e| err(e.to_string()))?;
                let parent = SynsetId::parse(f[1]).map_err(|e| err(e.to_string()))?;
                if !id.is_virtual() || parent.is_virtual() || !self.synsets.contains_key(&parent) {
                    return Err(err(format!("bad virtual record {id} under {parent}")));
                }
                if loaded.contains_key(&id) {
                    return Err(err(format!("duplicate virtual synset {id}")));
                }
                loaded.insert(
                    id.clone(),
                    VirtualSynset {
                        id,
                        parent,
                        name: f[2].to_string(),
                        classifier_ref: f[3].to_string(),
                        created_at: f[4].to_string(),
                    },
                );
            }
        }
        let mut reg = self.virtuals.write().unwrap_or_else(|e| e.into_inner());
        let n = loaded.len();
        reg.synsets = loaded;
        reg.path = Some(path.to_path_buf());
        Ok(n)
    }
}

fn longest_path(id: &SynsetId, synsets: &BTreeMap<SynsetId, Synset>, memo: &mut HashMap<SynsetId, u32>) -> u32 {
    if let Some(d) = memo.get(id) {
        return *d;
    }
    let d = synsets[id]
        .hypernyms
        .iter()
        .map(|h| longest_path(h, synsets, memo) + 1)
        .max()
        .unwrap_or(0);
    memo.insert(id.clone(), d);
    d
}

fn check_acyclic(synsets: &BTreeMap<SynsetId, Synset>) -> Result<(), LexiconError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: HashMap<&SynsetId, u8> = HashMap::new();
    for start in synsets.keys() {
        if state.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&SynsetId, usize)> = vec![(start, 0)];
        state.insert(start, 1);
        while let Some((id, next)) = stack.pop() {
            let parents = &synsets[id].hypernyms;
            if next < parents.len() {
                stack.push((id, next + 1));
                let p = &parents[next];
                match state.get(p).copied().unwrap_or(0) {
                    1 => return Err(LexiconError::Cycle(p.to_string())),
                    0 => {
                        state.insert(p, 1);
                        stack.push((p, 0));
                    }
                    _ => {}
                }
            } else {
                state.insert(id, 2);
            }
        }
    }
    Ok(())
}

fn parse_wordnet_index(text: &str, file: &str) -> Result<HashMap<String, Vec<u64>>, LexiconError> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with(' ') || line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| LexiconError::Parse {
            file: file.to_string(),
            line: n + 1,
            message: message.to_string(),
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 4 {
            return Err(err("truncated index line"));
        }
        let synset_cnt: usize = t[2].parse().map_err(|_| err("bad synset_cnt"))?;
        let p_cnt: usize = t[3].parse().map_err(|_| err("bad p_cnt"))?;
        let offsets_at = 4 + p_cnt + 2;
        if t.len() < offsets_at + synset_cnt {
            return Err(err("truncated index line"));
        }
        let offsets = t[offsets_at..offsets_at + synset_cnt]
            .iter()
            .map(|o| o.parse::<u64>().map_err(|_| err("bad synset offset")))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(t[0].to_lowercase(), offsets);
    }
    Ok(out)
}

fn parse_wordnet_data(
    text: &str,
    file: &str,
    pos: Pos,
    index: &HashMap<String, Vec<u64>>,
) -> Result<(Vec<RawSynset>, HashMap<u64, SynsetId>), LexiconError> {
    struct Entry {
        offset: u64,
        words: Vec<String>,
        hypernyms: Vec<u64>,
        gloss: String,
    }
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with(' ') || line.trim().is_empty() {
            continue;
        }
        let err = |offset: &str, message: &str| LexiconError::Parse {
            file: file.to_string(),
            line: n + 1,
            message: format!("synset offset {offset}: {message}"),
        };
        let (body, gloss) = match line.split_once(" | ") {
            Some((b, g)) => (b, g.trim().to_string()),
            None => (line.trim_end(), String::new()),
        };
        let t: Vec<&str> = body.split_whitespace().collect();
        let offset_str = t.first().copied().unwrap_or("?");
        let offset: u64 = offset_str.parse().map_err(|_| err(offset_str, "bad offset"))?;
        if t.len() < 4 {
            return Err(err(offset_str, "truncated line"));
        }
        let w_cnt = usize::from_str_radix(t[3], 16).map_err(|_| err(offset_str, "bad w_cnt"))?;
        let p_at = 4 + 2 * w_cnt;
        if t.len() <= p_at {
            return Err(err(offset_str, "truncated line"));
        }
        let words: Vec<String> = (0..w_cnt).map(|i| lemma_key(t[4 + 2 * i])).collect();
        let p_cnt: usize = t[p_at].parse().map_err(|_| err(offset_str, "bad p_cnt"))?;
        if t.len() < p_at + 1 + 4 * p_cnt {
            return Err(err(offset_str, "truncated pointer list"));
        }
        let mut hypernyms = Vec::new();
        for i in 0..p_cnt {
            let base = p_at + 1 + 4 * i;
            let symbol = t[base];
            if (symbol == "@" || symbol == "@i") && Pos::from_code(t[base + 2]) == Some(pos) {
                hypernyms.push(t[base + 1].parse().map_err(|_| err(offset_str, "bad pointer offset"))?);
            }
        }
        entries.push(Entry {
            offset,
            words,
            hypernyms,
            gloss,
        });
    }
    let mut ids: HashMap<u64, SynsetId> = HashMap::new();
    for e in &entries {
        let name = &e.words[0];
        let sense = index
            .get(name)
            .and_then(|offs| offs.iter().position(|o| *o == e.offset))
            .map_or(1, |p| p + 1);
        let id = SynsetId::parse(&format!("{name}.{pos}.{sense:02}")).map_err(|_| LexiconError::Parse {
            file: file.to_string(),
            line: 0,
            message: format!("synset offset {:08}: unusable lemma {name:?}", e.offset),
        })?;
        ids.insert(e.offset, id);
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let hypernyms = e
            .hypernyms
            .iter()
            .map(|o| {
                ids.get(o).cloned().ok_or_else(|| LexiconError::Parse {
                    file: file.to_string(),
                    line: 0,
                    message: format!("synset offset {:08}: dangling hypernym {o:08}", e.offset),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(RawSynset {
            id: ids[&e.offset].clone(),
            lemmas: e.words,
            gloss: e.gloss,
            hypernyms,
        });
    }
    Ok((out, ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIXTURE: &str = "\
entity.n.01|entity|that which exists|
person.n.01|person,individual|a human being|entity.n.01
policeman.n.01|policeman,police officer|a member of a police force|person.n.01
chef.n.01|chef|a professional cook|person.n.01
artifact.n.01|artifact|a man-made object|entity.n.01
car.n.01|car,auto|a motor vehicle with four wheels|artifact.n.01
";

    fn db() -> LexiconDb {
        LexiconDb::parse_fixture(FIXTURE, "fixture").unwrap()
    }

    fn id(s: &str) -> SynsetId {
        SynsetId::parse(s).unwrap()
    }

    #[test]
    fn ids_parse() {
        let v = id("kn95_face_mask.virtual.n.01");
        assert!(v.is_virtual());
        assert_eq!(v.lemma(), "kn95_face_mask");
        assert_eq!(id("car.n.01").pos(), Pos::Noun);
        assert!(SynsetId::parse("car.x.01").is_err());
        assert!(SynsetId::parse("car.n.1").is_err());
        assert!(SynsetId::parse("car").is_err());
    }

    #[test]
    fn fixture_depths() {
        let db = db();
        let depths: Vec<u32> = ["entity.n.01", "person.n.01", "policeman.n.01", "chef.n.01", "artifact.n.01", "car.n.01"]
            .iter()
            .map(|s| db.get(&id(s)).unwrap().depth)
            .collect();
        assert_eq!(depths, vec![0, 1, 2, 2, 1, 2]);
        assert_eq!(db.get(&id("person.n.01")).unwrap().hyponyms, vec![id("chef.n.01"), id("policeman.n.01")]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let bad = "entity.n.01|entity|x|\nperson.n.01|person|x\n";
        match LexiconDb::parse_fixture(bad, "f") {
            Err(LexiconError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cycle_detected() {
        let bad = "a.n.01|a|x|b.n.01\nb.n.01|b|y|a.n.01\n";
        assert!(matches!(LexiconDb::parse_fixture(bad, "f"), Err(LexiconError::Cycle(_))));
    }

    #[test]
    fn lookup() {
        let db = db();
        assert_eq!(db.synsets_of("chef", Pos::Noun)[0].id, id("chef.n.01"));
        assert!(db.synsets_of("zzz", Pos::Noun).is_empty());
        assert_eq!(db.synsets_of("Police Officer", Pos::Noun)[0].id, id("policeman.n.01"));
    }

    #[test]
    fn lch_cases() {
        let db = db();
        let p = id("policeman.n.01");
        assert_eq!(db.lowest_common_hypernym(&p, &id("chef.n.01")), Some(id("person.n.01")));
        assert_eq!(db.lowest_common_hypernym(&p, &p), Some(p.clone()));
        assert_eq!(db.lowest_common_hypernym(&p, &id("person.n.01")), Some(id("person.n.01")));
        assert_eq!(db.lowest_common_hypernym(&p, &id("car.n.01")), Some(id("entity.n.01")));
    }

    #[test]
    fn paths_and_chains() {
        let db = db();
        assert_eq!(
            db.hypernym_path(&id("policeman.n.01"), &id("entity.n.01")).unwrap(),
            vec![id("policeman.n.01"), id("person.n.01"), id("entity.n.01")]
        );
        assert_eq!(db.root_chain(&id("person.n.01")), vec![id("person.n.01"), id("entity.n.01")]);
        assert!(db.hypernym_path(&id("person.n.01"), &id("car.n.01")).is_none());
    }

    #[test]
    fn lesk_bank() {
        let text = "\
entity.n.01|entity|that which exists|
bank.n.01|bank|a financial institution that accepts deposits of money|entity.n.01
bank.n.02|bank|sloping land beside a river or body of water|entity.n.01
";
        let db = LexiconDb::parse_fixture(text, "f").unwrap();
        let ctx: Bag = ["river", "water"].into_iter().collect();
        assert_eq!(db.lesk_disambiguate("bank", Pos::Noun, &ctx).unwrap(), id("bank.n.02"));
        assert_eq!(db.lesk_disambiguate("bank", Pos::Noun, &Bag::new()).unwrap(), id("bank.n.01"));
        assert_eq!(db.lesk_disambiguate("chef", Pos::Noun, &ctx).is_err(), true);
        let single = self::db();
        assert_eq!(single.lesk_disambiguate("chef", Pos::Noun, &ctx).unwrap(), id("chef.n.01"));
    }

    #[test]
    fn morphy_rules() {
        let text = "ride.v.01|ride|sit and travel on the back of an animal|\nrun.v.01|run|move fast|\n";
        let db = LexiconDb::parse_fixture(text, "f").unwrap();
        assert_eq!(db.morphy("riding", Pos::Verb), vec!["ride"]);
        assert_eq!(db.morphy("rides", Pos::Verb), vec!["ride"]);
        assert_eq!(db.morphy("running", Pos::Verb), vec!["run"]);
        assert_eq!(self::db().morphy("policemen", Pos::Noun), vec!["policeman"]);
    }

    #[test]
    fn virtual_registration() {
        let text = "entity.n.01|entity|x|\nface_mask.n.01|face_mask|a mask|entity.n.01\nship.n.01|ship|a vessel|entity.n.01\n";
        let db = LexiconDb::parse_fixture(text, "f").unwrap();
        let fp = db.fingerprint();
        let v = db.register_virtual(&id("face_mask.n.01"), "kn95 face mask", "clf-1", "t0").unwrap();
        assert_eq!(v.id, id("kn95_face_mask.virtual.n.01"));
        let s = db.register_virtual(&id("ship.n.01"), "sovermenny ship", "clf-2", "t0").unwrap();
        assert_eq!(s.id.as_str(), "sovermenny_ship.virtual.n.01");
        assert!(db.hyponyms(&id("ship.n.01")).contains(&s.id));
        assert!(matches!(
            db.register_virtual(&id("face_mask.n.01"), "KN95 face-mask", "c", "t"),
            Err(LexiconError::DuplicateName(_))
        ));
        assert!(matches!(db.register_virtual(&id("boat.n.01"), "x", "c", "t"), Err(LexiconError::ParentNotFound(_))));
        assert!(matches!(db.register_virtual(&v.id, "y", "c", "t"), Err(LexiconError::ParentVirtual(_))));
        assert!(db.synsets_of("kn95_face_mask", Pos::Noun).is_empty());
        assert_eq!(db.fingerprint(), fp);
        assert_eq!(db.lowest_common_hypernym(&v.id, &id("face_mask.n.01")), Some(id("face_mask.n.01")));
        assert_eq!(db.depth(&v.id), Some(2));
    }

    #[test]
    fn registry_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("virtual.txt");
        let text = "entity.n.01|entity|x|\nship.n.01|ship|a vessel|entity.n.01\n";
        let db = LexiconDb::parse_fixture(text, "f").unwrap();
        db.attach_virtual_registry(&path).unwrap();
        db.register_virtual(&id("ship.n.01"), "sovermenny ship", "clf", "2024-01-01T00:00:00Z").unwrap();
        let db2 = LexiconDb::parse_fixture(text, "f").unwrap();
        assert_eq!(db2.attach_virtual_registry(&path).unwrap(), 1);
        assert_eq!(db2.virtual_synsets(), db.virtual_synsets());
    }
}
