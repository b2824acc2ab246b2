//! Brute-force re-derivation of video graphs over a small synthetic lexicon,
//! plus a seeded generator of knowledge bases that only use base word forms.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vidkg_core::graph::EvidenceKind;
use vidkg_core::inference::{BBox, Detection, OcrSpan, Tag};
use vidkg_core::kb::{CaptionRecord, FrameRecord, TranscriptRecord, TripletRecord, VideoKnowledgeBase, WindowRecord};
use vidkg_core::lexicon::LexiconDb;
use vidkg_core::text::content_words;

/// `(id, lemmas, gloss, hypernyms)` in sense order.
pub const SYNSETS: &[(&str, &str, &str, &str)] = &[
    ("entity.n.01", "entity", "thing exists", ""),
    ("physical_entity.n.01", "physical_entity", "entity physical existence", "entity.n.01"),
    ("abstraction.n.01", "abstraction", "general concept idea", "entity.n.01"),
    ("object.n.01", "object", "tangible visible entity", "physical_entity.n.01"),
    ("living_thing.n.01", "living_thing", "living entity", "object.n.01"),
    ("organism.n.01", "organism", "living body", "living_thing.n.01"),
    ("causal_agent.n.01", "causal_agent", "agent causing effect", "physical_entity.n.01"),
    ("person.n.01", "person,individual", "human being", "organism.n.01,causal_agent.n.01"),
    ("chef.n.01", "chef", "professional cook restaurant kitchen", "person.n.01"),
    ("cook.n.01", "cook", "person preparing food kitchen", "person.n.01"),
    ("policeman.n.01", "policeman,police_officer", "member police force street patrol", "person.n.01"),
    ("artifact.n.01", "artifact", "object built people", "object.n.01"),
    ("container.n.01", "container", "object holding things", "artifact.n.01"),
    ("pot.n.01", "pot", "metal container cooking soup stove", "container.n.01"),
    ("pot.n.02", "pot,grass", "marijuana leaves smoked", "abstraction.n.01"),
    ("vehicle.n.01", "vehicle", "conveyance transporting people", "artifact.n.01"),
    ("car.n.01", "car,auto", "motor vehicle wheels street", "vehicle.n.01"),
    ("clothing.n.01", "clothing", "covering worn body", "artifact.n.01"),
    ("apron.n.01", "apron", "garment protecting clothes cooking kitchen", "clothing.n.01"),
    ("hat.n.01", "hat", "headdress worn head", "clothing.n.01"),
    ("food.n.01", "food", "nutrient eaten", "physical_entity.n.01"),
    ("soup.n.01", "soup", "liquid food cooked pot", "food.n.01"),
    ("location.n.01", "location", "point region space", "physical_entity.n.01"),
    ("kitchen.n.01", "kitchen", "room food cooked", "location.n.01"),
    ("street.n.01", "street", "road city cars", "location.n.01"),
    ("bank.n.01", "bank", "sloping land river water", "location.n.01"),
    ("bank.n.02", "bank", "financial institution money deposits", "abstraction.n.01"),
    ("river.n.01", "river", "large stream water", "location.n.01"),
    ("money.n.01", "money", "currency paper coins", "abstraction.n.01"),
    ("act.v.01", "act,move", "perform action", ""),
    ("cook.v.01", "cook", "prepare food heating soup stove", "act.v.01"),
    ("stir.v.01", "stir", "mix soup spoon pot", "act.v.01"),
    ("walk.v.01", "walk", "move foot street", "act.v.01"),
    ("patrol.v.01", "patrol", "walk street police", "walk.v.01"),
    ("wear.v.01", "wear", "clothing body", ""),
    ("stand.v.01", "stand", "upright position feet", ""),
    ("park.v.01", "park", "leave car street", ""),
];

pub fn fixture_text() -> String {
    SYNSETS.iter().map(|(id, l, g, h)| format!("{id}|{l}|{g}|{h}\n")).collect()
}

pub fn lexicon() -> LexiconDb {
    LexiconDb::parse_fixture(&fixture_text(), "oracle").expect("oracle fixture parses")
}

pub const NOUNS: &[&str] = &[
    "chef", "cook", "policeman", "person", "pot", "grass", "car", "auto", "apron", "hat", "soup", "kitchen", "street",
    "bank", "river", "money", "vehicle", "container", "food",
];
pub const NOUN_PHRASES: &[&str] = &["police officer", "red pot", "big car", "river bank"];
pub const VERBS: &[&str] = &["cook", "stir", "walk", "patrol", "wear", "stand", "park", "move"];
pub const UNKNOWN: &[&str] = &["zorb", "blick", "red", "big", "holds"];
pub const FILLERS: &[&str] = &["the", "a", "with", "on", "in"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum P {
    N,
    V,
}

fn pos_of_id(id: &str) -> P {
    if id.contains(".v.") {
        P::V
    } else {
        P::N
    }
}

/// Independent view of the synset table.
pub struct Oracle {
    hyper: BTreeMap<String, Vec<String>>,
    senses: BTreeMap<(String, P), Vec<String>>,
    signature: BTreeMap<String, BTreeMap<String, usize>>,
}

fn bag(words: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let mut b = BTreeMap::new();
    for w in words {
        *b.entry(w).or_insert(0) += 1;
    }
    b
}

fn overlap(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> usize {
    a.iter().map(|(w, c)| (*c).min(*b.get(w).unwrap_or(&0))).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleNode {
    pub direct: bool,
    pub evidence: BTreeMap<(u32, u64), BTreeSet<EvidenceKind>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleGraph {
    pub windows: BTreeSet<u32>,
    pub nodes: BTreeMap<String, OracleNode>,
    pub edges: BTreeSet<(String, String)>,
}

impl Default for Oracle {
    fn default() -> Self {
        Self::new()
    }
}

impl Oracle {
    pub fn new() -> Self {
        let mut hyper = BTreeMap::new();
        let mut senses: BTreeMap<(String, P), Vec<String>> = BTreeMap::new();
        let mut signature = BTreeMap::new();
        for (id, lemmas, gloss, hypers) in SYNSETS {
            let hs: Vec<String> = hypers.split(',').filter(|h| !h.is_empty()).map(String::from).collect();
            hyper.insert(id.to_string(), hs);
            let mut sig: Vec<String> = content_words(gloss);
            for l in lemmas.split(',') {
                senses.entry((l.to_string(), pos_of_id(id))).or_default().push(id.to_string());
                sig.extend(content_words(&l.replace('_', " ")));
            }
            signature.insert(id.to_string(), bag(sig));
        }
        Self { hyper, senses, signature }
    }

    fn key(term: &str) -> String {
        term.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("_")
    }

    fn lookup(&self, term: &str, pos: P) -> Option<String> {
        let k = Self::key(term);
        self.senses.contains_key(&(k.clone(), pos)).then_some(k)
    }

    fn ancestors_or_self(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::from([id.to_string()]);
        for h in &self.hyper[id] {
            out.extend(self.ancestors_or_self(h));
        }
        out
    }

    fn max_depth(&self, id: &str) -> usize {
        self.hyper[id].iter().map(|h| 1 + self.max_depth(h)).max().unwrap_or(0)
    }

    fn min_depth(&self, id: &str) -> usize {
        self.hyper[id].iter().map(|h| 1 + self.min_depth(h)).min().unwrap_or(0)
    }

    fn roots(&self, pos: P) -> Vec<&String> {
        self.hyper.iter().filter(|(id, hs)| hs.is_empty() && pos_of_id(id) == pos).map(|(id, _)| id).collect()
    }

    fn lch(&self, a: &str, b: &str) -> Option<String> {
        let common: Vec<String> = self.ancestors_or_self(a).intersection(&self.ancestors_or_self(b)).cloned().collect();
        if common.is_empty() {
            let roots = self.roots(pos_of_id(a));
            return (roots.len() == 1).then(|| roots[0].clone());
        }
        common.into_iter().max_by(|x, y| self.max_depth(x).cmp(&self.max_depth(y)).then(y.cmp(x)))
    }

    fn all_paths(&self, from: &str, to: &str) -> Vec<Vec<String>> {
        if from == to {
            return vec![vec![from.to_string()]];
        }
        let mut out = Vec::new();
        for h in &self.hyper[from] {
            for mut p in self.all_paths(h, to) {
                p.insert(0, from.to_string());
                out.push(p);
            }
        }
        out
    }

    fn shortest_path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        self.all_paths(from, to).into_iter().min_by(|x, y| x.len().cmp(&y.len()).then(x.cmp(y)))
    }

    fn root_chain(&self, from: &str) -> Vec<String> {
        let mut out = vec![from.to_string()];
        let mut cur = from.to_string();
        while let Some(next) = self.hyper[&cur].iter().min_by(|x, y| self.min_depth(x).cmp(&self.min_depth(y)).then(x.cmp(y))) {
            out.push(next.clone());
            cur = next.clone();
        }
        out
    }

    fn lesk(&self, lemma: &str, pos: P, context: &BTreeMap<String, usize>) -> String {
        let cands = &self.senses[&(lemma.to_string(), pos)];
        let mut best = (cands[0].clone(), 0);
        for c in cands {
            let o = overlap(&self.signature[c], context);
            if o > best.1 {
                best = (c.clone(), o);
            }
        }
        best.0
    }

    fn frame_words(&self, frame: &FrameRecord, window: &WindowRecord) -> BTreeMap<(String, P), BTreeSet<EvidenceKind>> {
        let mut out: BTreeMap<(String, P), BTreeSet<EvidenceKind>> = BTreeMap::new();
        let verbs: BTreeSet<String> =
            frame.triplets.iter().filter_map(|t| t.relation.split_whitespace().next()).map(|v| v.to_lowercase()).collect();
        let pos_of = |w: &str| if verbs.contains(w) { P::V } else { P::N };
        let mut add = |term: &str, pos: P, kind: EvidenceKind| -> bool {
            match self.lookup(term, pos) {
                Some(l) => {
                    out.entry((l, pos)).or_default().insert(kind);
                    true
                }
                None => false,
            }
        };
        let phrase = |term: &str, kind: EvidenceKind, add: &mut dyn FnMut(&str, P, EvidenceKind) -> bool| {
            if !add(term, P::N, kind) {
                let ws = content_words(term);
                if ws.len() > 1 {
                    for w in ws {
                        add(&w, P::N, kind);
                    }
                }
            }
        };
        for t in &frame.tags {
            phrase(&t.label, EvidenceKind::Tag, &mut add);
        }
        for d in &frame.detections {
            phrase(&d.label, EvidenceKind::Detection, &mut add);
        }
        for c in &frame.captions {
            for w in content_words(&c.text) {
                add(&w, pos_of(&w), EvidenceKind::Caption);
            }
        }
        for t in &frame.triplets {
            phrase(&t.subject, EvidenceKind::Triplet, &mut add);
            phrase(&t.object, EvidenceKind::Triplet, &mut add);
            if let Some(v) = t.relation.split_whitespace().next() {
                add(v, P::V, EvidenceKind::Triplet);
            }
        }
        for s in &frame.ocr {
            for w in content_words(&s.text) {
                add(&w, pos_of(&w), EvidenceKind::Ocr);
            }
        }
        for w in content_words(&window.transcript.text) {
            add(&w, pos_of(&w), EvidenceKind::Transcript);
        }
        out
    }

    /// The graph every knowledge base should map to, derived without the
    /// library's graph code.
    pub fn derive(&self, kb: &VideoKnowledgeBase) -> OracleGraph {
        let video_words: Vec<String> = kb.windows.iter().flat_map(|w| content_words(&w.transcript.text)).collect();
        let mut direct: Vec<(String, (u32, u64), BTreeSet<EvidenceKind>)> = Vec::new();
        let mut edges = BTreeSet::new();
        let mut nodes: BTreeSet<String> = BTreeSet::new();
        for w in &kb.windows {
            let mut ctx = video_words.clone();
            for f in &w.keyframes {
                for c in &f.captions {
                    ctx.extend(content_words(&c.text));
                }
                for t in &f.tags {
                    ctx.extend(content_words(&t.label));
                }
            }
            let ctx = bag(ctx);
            for f in &w.keyframes {
                let mut chosen: BTreeMap<String, BTreeSet<EvidenceKind>> = BTreeMap::new();
                for ((lemma, pos), kinds) in self.frame_words(f, w) {
                    chosen.entry(self.lesk(&lemma, pos, &ctx)).or_default().extend(kinds);
                }
                let ids: Vec<&String> = chosen.keys().collect();
                for (i, a) in ids.iter().enumerate() {
                    for b in &ids[i + 1..] {
                        if pos_of_id(a) != pos_of_id(b) {
                            continue;
                        }
                        let Some(h) = self.lch(a, b) else { continue };
                        let mut chains = vec![self.root_chain(&h)];
                        for x in [a, b] {
                            chains.extend(self.shortest_path(x, &h));
                        }
                        for c in chains {
                            nodes.extend(c.iter().cloned());
                            for p in c.windows(2) {
                                edges.insert((p[0].clone(), p[1].clone()));
                            }
                        }
                    }
                }
                for (id, kinds) in chosen {
                    nodes.insert(id.clone());
                    direct.push((id, (w.index, f.frame_index), kinds));
                }
            }
        }
        let mut out: BTreeMap<String, OracleNode> = nodes
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    OracleNode {
                        direct: false,
                        evidence: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for (id, key, kinds) in &direct {
            out.get_mut(id).unwrap().direct = true;
            for v in reachable(id, &edges) {
                out.get_mut(&v).unwrap().evidence.entry(*key).or_default().extend(kinds.iter().copied());
            }
        }
        OracleGraph {
            windows: kb.windows.iter().map(|w| w.index).collect(),
            nodes: out,
            edges,
        }
    }
}

/// `from` and every node above it through `edges`.
fn reachable(from: &str, edges: &BTreeSet<(String, String)>) -> BTreeSet<String> {
    let mut seen = BTreeSet::from([from.to_string()]);
    loop {
        let next: Vec<String> =
            edges.iter().filter(|(c, p)| seen.contains(c) && !seen.contains(p)).map(|(_, p)| p.clone()).collect();
        if next.is_empty() {
            return seen;
        }
        seen.extend(next);
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap()
}

fn noun_or_phrase(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.2) {
        pick(rng, NOUN_PHRASES).to_string()
    } else {
        pick(rng, NOUNS).to_string()
    }
}

fn text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=4 => pick(rng, NOUNS),
            5..=6 => pick(rng, VERBS),
            7 => pick(rng, UNKNOWN),
            _ => pick(rng, FILLERS),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn bbox(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.gen_range(0.0..0.5);
    let y0 = rng.gen_range(0.0..0.5);
    BBox {
        x0,
        y0,
        x1: x0 + rng.gen_range(0.1..0.5),
        y1: y0 + rng.gen_range(0.1..0.5),
    }
}

/// A valid knowledge base with up to 5 windows, up to 4 keyframes per window
/// and up to 10 words per text.
pub fn random_kb(rng: &mut ChaCha8Rng, video_id: &str) -> VideoKnowledgeBase {
    let mut kb = VideoKnowledgeBase::new(video_id, "oracle", "2026-01-01T00:00:00Z");
    let mut t0 = 0.0;
    let mut frame = 0u64;
    for index in 0..rng.gen_range(1..=5u32) {
        let len = rng.gen_range(1.0..6.0);
        let spoken = rng.gen_bool(0.7);
        let transcript = TranscriptRecord {
            text: if spoken { text(rng, 10) } else { String::new() },
            start: t0,
            end: t0 + len,
        };
        let mut keyframes = Vec::new();
        let n = rng.gen_range(0..=4);
        for k in 0..n {
            frame += rng.gen_range(1..4);
            let mut f = FrameRecord::empty(frame, t0 + len * (k as f64 + 0.5) / n as f64);
            for _ in 0..rng.gen_range(0..=3) {
                f.tags.push(Tag::new(noun_or_phrase(rng), rng.gen_range(0.0..=1.0)));
            }
            for _ in 0..rng.gen_range(0..=2) {
                f.detections.push(Detection {
                    label: noun_or_phrase(rng),
                    bbox: bbox(rng),
                    confidence: rng.gen_range(0.0..=1.0),
                });
            }
            for _ in 0..rng.gen_range(0..=2) {
                f.captions.push(CaptionRecord {
                    text: text(rng, 10),
                    crop: rng.gen_bool(0.3).then(|| bbox(rng)),
                });
            }
            for _ in 0..rng.gen_range(0..=2) {
                let verb = if rng.gen_bool(0.15) { "holds" } else { pick(rng, VERBS) };
                let relation = match rng.gen_range(0..3) {
                    0 => verb.to_string(),
                    1 => format!("{verb} on"),
                    _ => format!("{verb} next to"),
                };
                f.triplets.push(TripletRecord {
                    subject: noun_or_phrase(rng),
                    relation,
                    object: noun_or_phrase(rng),
                    caption_index: rng.gen_range(0..f.captions.len().max(1)) as u32,
                });
            }
            if rng.gen_bool(0.3) {
                f.ocr.push(OcrSpan {
                    text: text(rng, 4),
                    bbox: rng.gen_bool(0.5).then(|| bbox(rng)),
                    confidence: rng.gen_range(0.0..=1.0),
                });
            }
            keyframes.push(f);
        }
        kb.windows.push(WindowRecord {
            index,
            transcript,
            keyframes,
        });
        t0 += len;
    }
    kb
}
