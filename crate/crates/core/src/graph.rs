//! Video knowledge graphs: synset nodes carrying frame evidence, linked along
//! hypernym chains, built frame by frame from a knowledge base and merged.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{load_kb, FrameRecord, KbError, VideoKnowledgeBase, WindowRecord};
use crate::lexicon::{lemma_key, LexiconDb, Pos, SynsetId};
use crate::text::{content_words, Bag};

pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph was built with lexicon {found}, current lexicon is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("unsupported graph version {0}")]
    Version(u32),
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which part of a frame record a word came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Tag,
    Detection,
    Caption,
    Triplet,
    Ocr,
    Transcript,
    /// Accepted by a virtual synset's classifier during reindexing.
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceKey {
    pub window: u32,
    pub frame: u64,
}

impl EvidenceKey {
    pub fn new(window: u32, frame: u64) -> Self {
        Self { window, frame }
    }
}

pub type Evidence = BTreeMap<EvidenceKey, BTreeSet<EvidenceKind>>;

pub fn union_evidence(into: &mut Evidence, from: &Evidence) {
    for (k, kinds) in from {
        into.entry(*k).or_default().extend(kinds.iter().copied());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynsetNode {
    pub id: SynsetId,
    /// Observed in a frame, as opposed to created to connect other nodes.
    pub direct: bool,
    pub evidence: Evidence,
}

impl SynsetNode {
    pub fn direct(id: SynsetId, evidence: Evidence) -> Self {
        Self {
            id,
            direct: true,
            evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VideoKnowledgeGraph {
    pub video_id: String,
    pub fingerprint: String,
    pub windows: BTreeSet<u32>,
    pub nodes: BTreeMap<SynsetId, SynsetNode>,
    /// `(child, parent)` hypernym edges.
    pub edges: BTreeSet<(SynsetId, SynsetId)>,
}

impl VideoKnowledgeGraph {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &SynsetId) -> Option<&SynsetNode> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &SynsetId) -> bool {
        self.nodes.contains_key(id)
    }

    /// Adds a node or folds it into the existing one.
    pub fn add_node(&mut self, node: SynsetNode) {
        match self.nodes.get_mut(&node.id) {
            Some(n) => {
                n.direct |= node.direct;
                union_evidence(&mut n.evidence, &node.evidence);
            }
            None => {
                self.nodes.insert(node.id.clone(), node);
            }
        }
    }

    fn ensure_node(&mut self, id: &SynsetId) {
        if !self.nodes.contains_key(id) {
            self.nodes.insert(
                id.clone(),
                SynsetNode {
                    id: id.clone(),
                    direct: false,
                    evidence: Evidence::new(),
                },
            );
        }
    }

    /// Adds every node of a child-to-ancestor chain and the edges between
    /// consecutive entries.
    pub fn add_chain(&mut self, chain: &[SynsetId]) {
        for id in chain {
            self.ensure_node(id);
        }
        for pair in chain.windows(2) {
            self.edges.insert((pair[0].clone(), pair[1].clone()));
        }
    }

    pub fn parents(&self, id: &SynsetId) -> Vec<&SynsetId> {
        self.edges.iter().filter(|(c, _)| c == id).map(|(_, p)| p).collect()
    }

    pub fn children(&self, id: &SynsetId) -> Vec<&SynsetId> {
        self.edges.iter().filter(|(_, p)| p == id).map(|(c, _)| c).collect()
    }

    /// Every node reachable upward from `id` through edges, excluding `id`.
    pub fn graph_ancestors(&self, id: &SynsetId) -> BTreeSet<SynsetId> {
        let mut up: BTreeMap<&SynsetId, Vec<&SynsetId>> = BTreeMap::new();
        for (c, p) in &self.edges {
            up.entry(c).or_default().push(p);
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            for p in up.get(cur).into_iter().flatten() {
                if seen.insert((*p).clone()) {
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Re-closes evidence so every node holds the evidence of all nodes
    /// below it.
    pub fn propagate(&mut self) {
        let mut up: BTreeMap<SynsetId, Vec<SynsetId>> = BTreeMap::new();
        for (c, p) in &self.edges {
            up.entry(c.clone()).or_default().push(p.clone());
        }
        let snapshot: Vec<(SynsetId, Evidence)> = self
            .nodes
            .values()
            .filter(|n| !n.evidence.is_empty())
            .map(|n| (n.id.clone(), n.evidence.clone()))
            .collect();
        for (id, ev) in snapshot {
            let mut seen = BTreeSet::new();
            let mut stack = vec![id];
            while let Some(cur) = stack.pop() {
                for p in up.get(&cur).into_iter().flatten() {
                    if seen.insert(p.clone()) {
                        stack.push(p.clone());
                    }
                }
            }
            for a in seen {
                if let Some(n) = self.nodes.get_mut(&a) {
                    union_evidence(&mut n.evidence, &ev);
                }
            }
        }
    }

    /// Structural checks against the lexicon: edges are single hypernym
    /// steps (or virtual-to-parent links) and evidence is closed upward.
    pub fn validate(&self, lexicon: &LexiconDb) -> Result<(), GraphError> {
        for (c, p) in &self.edges {
            if !self.nodes.contains_key(c) || !self.nodes.contains_key(p) {
                return Err(GraphError::Malformed(format!("edge {c} -> {p} has a missing endpoint")));
            }
            let ok = if c.is_virtual() {
                lexicon.virtual_synset(c).is_some_and(|v| &v.parent == p)
            } else {
                lexicon.get(c).is_some_and(|s| s.hypernyms.contains(p))
            };
            if !ok {
                return Err(GraphError::Malformed(format!("edge {c} -> {p} is not a hypernym link")));
            }
            let (ce, pe) = (&self.nodes[c].evidence, &self.nodes[p].evidence);
            for (k, kinds) in ce {
                if !pe.get(k).is_some_and(|pk| pk.is_superset(kinds)) {
                    return Err(GraphError::Malformed(format!("evidence of {c} is not contained in {p}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            version: GRAPH_VERSION,
            video_id: self.video_id.clone(),
            fingerprint: self.fingerprint.clone(),
            windows: self.windows.iter().copied().collect(),
            nodes: self
                .nodes
                .values()
                .map(|n| NodeDoc {
                    id: n.id.clone(),
                    direct: n.direct,
                    evidence: n
                        .evidence
                        .iter()
                        .map(|(k, kinds)| EvidenceDoc {
                            window: k.window,
                            frame: k.frame,
                            kinds: kinds.iter().copied().collect(),
                        })
                        .collect(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(c, p)| EdgeDoc {
                    child: c.clone(),
                    parent: p.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serializes");
        s.push('\n');
        s
    }

    /// Parses a graph document; with a lexicon, its fingerprint must match.
    pub fn from_json(text: &str, lexicon: Option<&LexiconDb>) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        if doc.version != GRAPH_VERSION {
            return Err(GraphError::Version(doc.version));
        }
        if let Some(lex) = lexicon {
            let expected = lex.fingerprint();
            if expected != doc.fingerprint {
                return Err(GraphError::FingerprintMismatch {
                    expected,
                    found: doc.fingerprint,
                });
            }
        }
        let mut g = VideoKnowledgeGraph::new(doc.video_id);
        g.fingerprint = doc.fingerprint;
        g.windows = doc.windows.into_iter().collect();
        for n in doc.nodes {
            let mut evidence = Evidence::new();
            for e in n.evidence {
                evidence.entry(EvidenceKey::new(e.window, e.frame)).or_default().extend(e.kinds);
            }
            if g.nodes.contains_key(&n.id) {
                return Err(GraphError::Malformed(format!("duplicate node {}", n.id)));
            }
            g.nodes.insert(
                n.id.clone(),
                SynsetNode {
                    id: n.id,
                    direct: n.direct,
                    evidence,
                },
            );
        }
        for e in doc.edges {
            if !g.nodes.contains_key(&e.child) || !g.nodes.contains_key(&e.parent) {
                return Err(GraphError::Malformed(format!("edge {} -> {} has a missing endpoint", e.child, e.parent)));
            }
            g.edges.insert((e.child, e.parent));
        }
        Ok(g)
    }

    pub fn load(path: &Path, lexicon: Option<&LexiconDb>) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?, lexicon)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    video_id: String,
    fingerprint: String,
    windows: Vec<u32>,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: SynsetId,
    direct: bool,
    evidence: Vec<EvidenceDoc>,
}

#[derive(Serialize, Deserialize)]
struct EvidenceDoc {
    window: u32,
    frame: u64,
    kinds: Vec<EvidenceKind>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    child: SynsetId,
    parent: SynsetId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordKey {
    pub lemma: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordEntry {
    pub candidates: Vec<SynsetId>,
    pub kinds: BTreeSet<EvidenceKind>,
}

/// Resolves a surface term to a lexicon lemma, trying the term itself and
/// then its base forms.
pub fn lookup_term(term: &str, pos: Pos, lexicon: &LexiconDb) -> Option<(String, Vec<SynsetId>)> {
    let key = lemma_key(term);
    if key.is_empty() {
        return None;
    }
    let lemma = if lexicon.has_lemma(&key, pos) {
        key
    } else {
        lexicon.morphy(&key, pos).into_iter().next()?
    };
    let ids = lexicon.synsets_of(&lemma, pos).into_iter().map(|s| s.id.clone()).collect();
    Some((lemma, ids))
}

fn add_word(out: &mut BTreeMap<WordKey, WordEntry>, term: &str, pos: Pos, kind: EvidenceKind, lexicon: &LexiconDb) -> bool {
    match lookup_term(term, pos, lexicon) {
        Some((lemma, candidates)) => {
            out.entry(WordKey { lemma, pos })
                .or_insert_with(|| WordEntry {
                    candidates,
                    kinds: BTreeSet::new(),
                })
                .kinds
                .insert(kind);
            true
        }
        None => false,
    }
}

/// A phrase is looked up whole, then word by word when the whole misses.
fn add_phrase(out: &mut BTreeMap<WordKey, WordEntry>, phrase: &str, pos: Pos, kind: EvidenceKind, lexicon: &LexiconDb) {
    if !add_word(out, phrase, pos, kind, lexicon) {
        let words = content_words(phrase);
        if words.len() > 1 {
            for w in words {
                add_word(out, &w, pos, kind, lexicon);
            }
        }
    }
}

/// Words of a frame with their candidate senses. A token is a verb when it
/// fills the verb slot of one of the frame's triplets, otherwise a noun.
/// Tokens without a lexicon entry are dropped.
pub fn extract_words(frame: &FrameRecord, window: &WindowRecord, lexicon: &LexiconDb) -> BTreeMap<WordKey, WordEntry> {
    let mut out = BTreeMap::new();
    let verbs: BTreeSet<String> = frame
        .triplets
        .iter()
        .filter_map(|t| t.relation.split_whitespace().next().map(str::to_lowercase))
        .collect();
    let pos_of = |w: &str| if verbs.contains(w) { Pos::Verb } else { Pos::Noun };
    for t in &frame.tags {
        add_phrase(&mut out, &t.label, Pos::Noun, EvidenceKind::Tag, lexicon);
    }
    for d in &frame.detections {
        add_phrase(&mut out, &d.label, Pos::Noun, EvidenceKind::Detection, lexicon);
    }
    for c in &frame.captions {
        for w in content_words(&c.text) {
            add_word(&mut out, &w, pos_of(&w), EvidenceKind::Caption, lexicon);
        }
    }
    for t in &frame.triplets {
        add_phrase(&mut out, &t.subject, Pos::Noun, EvidenceKind::Triplet, lexicon);
        add_phrase(&mut out, &t.object, Pos::Noun, EvidenceKind::Triplet, lexicon);
        if let Some(v) = t.relation.split_whitespace().next() {
            add_word(&mut out, v, Pos::Verb, EvidenceKind::Triplet, lexicon);
        }
    }
    for s in &frame.ocr {
        for w in content_words(&s.text) {
            add_word(&mut out, &w, pos_of(&w), EvidenceKind::Ocr, lexicon);
        }
    }
    for w in content_words(&window.transcript.text) {
        add_word(&mut out, &w, pos_of(&w), EvidenceKind::Transcript, lexicon);
    }
    out
}

/// Content words of every transcript in the video.
pub fn video_context(kb: &VideoKnowledgeBase) -> Bag {
    let mut bag = Bag::new();
    for w in &kb.windows {
        bag.extend_text(&w.transcript.text);
    }
    bag
}

/// Video transcript words plus the captions and tags of every keyframe of the
/// window.
pub fn window_context(video: &Bag, window: &WindowRecord) -> Bag {
    let mut bag = video.clone();
    for f in &window.keyframes {
        for c in &f.captions {
            bag.extend_text(&c.text);
        }
        for t in &f.tags {
            bag.extend_text(&t.label);
        }
    }
    bag
}

pub fn disambiguate_frame(
    words: &BTreeMap<WordKey, WordEntry>,
    context: &Bag,
    lexicon: &LexiconDb,
) -> BTreeMap<WordKey, SynsetId> {
    words
        .iter()
        .filter_map(|(k, _)| lexicon.lesk_disambiguate(&k.lemma, k.pos, context).ok().map(|id| (k.clone(), id)))
        .collect()
}

/// One direct node per chosen sense, with the frame's evidence kinds.
pub fn construct_synset_nodes(
    senses: &BTreeMap<WordKey, SynsetId>,
    words: &BTreeMap<WordKey, WordEntry>,
    key: EvidenceKey,
) -> Vec<SynsetNode> {
    let mut by_id: BTreeMap<SynsetId, BTreeSet<EvidenceKind>> = BTreeMap::new();
    for (w, id) in senses {
        by_id.entry(id.clone()).or_default().extend(words[w].kinds.iter().copied());
    }
    by_id
        .into_iter()
        .map(|(id, kinds)| SynsetNode::direct(id, BTreeMap::from([(key, kinds)])))
        .collect()
}

/// Chain from a node up to an ancestor; a virtual node steps to its parent
/// first.
fn chain_to(lexicon: &LexiconDb, from: &SynsetId, to: &SynsetId) -> Option<Vec<SynsetId>> {
    if from.is_virtual() {
        let parent = lexicon.virtual_synset(from)?.parent;
        let mut chain = vec![from.clone()];
        chain.extend(lexicon.hypernym_path(&parent, to)?);
        Some(chain)
    } else {
        lexicon.hypernym_path(from, to)
    }
}

/// Links the nodes of one frame: every same-pos pair is joined through the
/// chains up to its lowest common hypernym, which in turn is chained to its
/// root. Evidence is then propagated upward.
pub fn construct_graph(video_id: &str, nodes: Vec<SynsetNode>, lexicon: &LexiconDb) -> VideoKnowledgeGraph {
    let mut g = VideoKnowledgeGraph::new(video_id);
    let ids: Vec<SynsetId> = nodes.iter().map(|n| n.id.clone()).collect();
    for n in nodes {
        g.add_node(n);
    }
    for id in &ids {
        if id.is_virtual() {
            if let Some(v) = lexicon.virtual_synset(id) {
                g.add_chain(&[id.clone(), v.parent]);
            }
        }
    }
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            if a.pos() != b.pos() {
                continue;
            }
            let Some(h) = lexicon.lowest_common_hypernym(a, b) else {
                continue;
            };
            for x in [a, b] {
                if let Some(chain) = chain_to(lexicon, x, &h) {
                    g.add_chain(&chain);
                }
            }
            g.add_chain(&lexicon.root_chain(&h));
        }
    }
    g.propagate();
    g
}

/// Union of nodes (evidence union, direct flags or-ed), edges and windows,
/// with evidence re-closed. The first graph's id and fingerprint are kept.
pub fn merge_graphs<'a>(graphs: impl IntoIterator<Item = &'a VideoKnowledgeGraph>) -> VideoKnowledgeGraph {
    let mut out: Option<VideoKnowledgeGraph> = None;
    for g in graphs {
        match out.as_mut() {
            None => out = Some(g.clone()),
            Some(o) => {
                for n in g.nodes.values() {
                    o.add_node(n.clone());
                }
                o.edges.extend(g.edges.iter().cloned());
                o.windows.extend(g.windows.iter().copied());
            }
        }
    }
    let mut out = out.unwrap_or_default();
    out.propagate();
    out
}

/// The frame-level graph of one keyframe.
pub fn frame_graph(
    video_id: &str,
    window: &WindowRecord,
    frame: &FrameRecord,
    context: &Bag,
    lexicon: &LexiconDb,
) -> VideoKnowledgeGraph {
    let words = extract_words(frame, window, lexicon);
    let senses = disambiguate_frame(&words, context, lexicon);
    let nodes = construct_synset_nodes(&senses, &words, EvidenceKey::new(window.index, frame.frame_index));
    construct_graph(video_id, nodes, lexicon)
}

/// Knowledge base to knowledge graph: frame graphs merged per window, window
/// graphs merged per video.
pub fn video_to_kg(kb: &VideoKnowledgeBase, lexicon: &LexiconDb) -> VideoKnowledgeGraph {
    let video_ctx = video_context(kb);
    let mut g = VideoKnowledgeGraph::new(&kb.video_id);
    for window in &kb.windows {
        let ctx = window_context(&video_ctx, window);
        let frame_graphs: Vec<VideoKnowledgeGraph> = window
            .keyframes
            .iter()
            .map(|f| frame_graph(&kb.video_id, window, f, &ctx, lexicon))
            .collect();
        let mut gw = merge_graphs(&frame_graphs);
        gw.video_id = kb.video_id.clone();
        gw.windows.insert(window.index);
        g = merge_graphs([&g, &gw]);
    }
    g.fingerprint = lexicon.fingerprint();
    g
}

pub fn video_to_kg_file(path: &Path, lexicon: &LexiconDb) -> Result<VideoKnowledgeGraph, GraphError> {
    Ok(video_to_kg(&load_kb(path)?, lexicon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Tag;
    use crate::kb::{TranscriptRecord, TripletRecord, CaptionRecord};

    const FIXTURE: &str = "\
entity.n.01|entity|that which exists|
person.n.01|person,individual|a human being|entity.n.01
policeman.n.01|policeman,police officer|a member of a police force|person.n.01
chef.n.01|chef|a professional cook|person.n.01
artifact.n.01|artifact|a man-made object|entity.n.01
car.n.01|car,auto|a motor vehicle with four wheels|artifact.n.01
man.n.01|man|an adult male person|person.n.01
animal.n.01|animal|a living organism|entity.n.01
horse.n.01|horse|a large animal ridden by people|animal.n.01
ride.v.01|ride|sit and travel on the back of an animal|
";

    fn lex() -> LexiconDb {
        LexiconDb::parse_fixture(FIXTURE, "fixture").unwrap()
    }

    fn id(s: &str) -> SynsetId {
        SynsetId::parse(s).unwrap()
    }

    fn window(frames: Vec<FrameRecord>) -> WindowRecord {
        WindowRecord {
            index: 0,
            transcript: TranscriptRecord {
                text: String::new(),
                start: 0.0,
                end: 10.0,
            },
            keyframes: frames,
        }
    }

    fn tagged(frame: u64, tags: &[&str]) -> FrameRecord {
        let mut f = FrameRecord::empty(frame, frame as f64 * 0.1);
        f.tags = tags.iter().map(|t| Tag::new(*t, 0.9)).collect();
        f
    }

    #[test]
    fn tags_extract_directly() {
        let lex = lex();
        let f = tagged(0, &["policeman", "chef", "qwzx"]);
        let words = extract_words(&f, &window(vec![]), &lex);
        let keys: Vec<&str> = words.keys().map(|k| k.lemma.as_str()).collect();
        assert_eq!(keys, vec!["chef", "policeman"]);
        assert_eq!(words.values().next().unwrap().candidates, vec![id("chef.n.01")]);
    }

    #[test]
    fn caption_verbs_follow_triplets() {
        let lex = lex();
        let mut f = FrameRecord::empty(0, 0.0);
        f.captions.push(CaptionRecord {
            text: "a man riding a horse".into(),
            crop: None,
        });
        f.triplets.push(TripletRecord {
            subject: "man".into(),
            relation: "riding".into(),
            object: "horse".into(),
            caption_index: 0,
        });
        let words = extract_words(&f, &window(vec![]), &lex);
        let keys: Vec<(String, Pos)> = words.keys().map(|k| (k.lemma.clone(), k.pos)).collect();
        assert_eq!(
            keys,
            vec![("horse".into(), Pos::Noun), ("man".into(), Pos::Noun), ("ride".into(), Pos::Verb)]
        );
    }

    #[test]
    fn worked_example() {
        let lex = lex();
        let f = tagged(7, &["policeman", "chef"]);
        let w = window(vec![f.clone()]);
        let g = frame_graph("v", &w, &f, &Bag::new(), &lex);
        let nodes: Vec<&str> = g.nodes.keys().map(SynsetId::as_str).collect();
        assert_eq!(nodes, vec!["chef.n.01", "entity.n.01", "person.n.01", "policeman.n.01"]);
        assert!(!g.nodes[&id("person.n.01")].direct);
        assert!(g.edges.contains(&(id("policeman.n.01"), id("person.n.01"))));
        assert!(g.edges.contains(&(id("chef.n.01"), id("person.n.01"))));
        assert!(g.edges.contains(&(id("person.n.01"), id("entity.n.01"))));
        assert_eq!(g.nodes[&id("person.n.01")].evidence.keys().collect::<Vec<_>>(), vec![&EvidenceKey::new(0, 7)]);
        g.validate(&lex).unwrap();
    }

    #[test]
    fn single_node_graph() {
        let lex = lex();
        let g = construct_graph("v", vec![SynsetNode::direct(id("car.n.01"), Evidence::new())], &lex);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn ancestor_pair_chains() {
        let lex = lex();
        let ev = |f| BTreeMap::from([(EvidenceKey::new(0, f), BTreeSet::from([EvidenceKind::Tag]))]);
        let g = construct_graph(
            "v",
            vec![SynsetNode::direct(id("policeman.n.01"), ev(1)), SynsetNode::direct(id("person.n.01"), ev(2))],
            &lex,
        );
        assert!(g.edges.contains(&(id("policeman.n.01"), id("person.n.01"))));
        assert_eq!(g.nodes[&id("person.n.01")].evidence.len(), 2);
    }

    #[test]
    fn merge_algebra() {
        let lex = lex();
        let w = window(vec![]);
        let g1 = frame_graph("v", &w, &tagged(1, &["policeman", "chef"]), &Bag::new(), &lex);
        let g2 = frame_graph("v", &w, &tagged(2, &["man", "horse"]), &Bag::new(), &lex);
        assert_eq!(merge_graphs([&g1, &g1]), g1);
        assert_eq!(merge_graphs([&g1, &g2]), merge_graphs([&g2, &g1]));
        let m = merge_graphs([&g1, &g2]);
        assert_eq!(m.nodes[&id("person.n.01")].evidence.len(), 2);
        m.validate(&lex).unwrap();
    }

    #[test]
    fn persistence_round_trip() {
        let lex = lex();
        let f = tagged(7, &["policeman", "chef"]);
        let mut kb = VideoKnowledgeBase::new("v", "fp", "t");
        kb.windows.push(window(vec![f]));
        let g = video_to_kg(&kb, &lex);
        let back = VideoKnowledgeGraph::from_json(&g.to_json(), Some(&lex)).unwrap();
        assert_eq!(back, g);
        let other = LexiconDb::parse_fixture("entity.n.01|entity|x|\n", "f").unwrap();
        assert!(matches!(
            VideoKnowledgeGraph::from_json(&g.to_json(), Some(&other)),
            Err(GraphError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn empty_kb_empty_graph() {
        let kb = VideoKnowledgeBase::new("v", "fp", "t");
        assert!(video_to_kg(&kb, &lex()).is_empty());
    }
}
