//! Queries rendered into synset graphs and ranked against video graphs by
//! overlap.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{construct_graph, lookup_term, EvidenceKey, SynsetNode, VideoKnowledgeGraph};
use crate::lexicon::{lemma_key, slugify, LexiconDb, Pos, SynsetId};
use crate::relations::parse_triplet_terms;
use crate::text::{is_stopword, tokenize, Bag};

/// Longest n-gram tried against virtual names and multiword lemmas.
pub const MAX_NGRAM: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("query {0:?} has no known terms")]
    NoKnownTerms(String),
    #[error("video {video} was built with lexicon {found}, query uses {expected}")]
    FingerprintMismatch {
        video: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGraph {
    pub origin: String,
    pub graph: VideoKnowledgeGraph,
    /// Nodes that come from query words, with their depths.
    pub direct: BTreeMap<SynsetId, u32>,
}

/// A query term found in the lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryTerm {
    Virtual(SynsetId),
    Word { lemma: String, pos: Pos },
}

/// Query terms in text order: virtual names by slug first, then the
/// longest multiword lemma, then single content words.
pub fn query_terms(text: &str, lexicon: &LexiconDb) -> Vec<QueryTerm> {
    let tokens = tokenize(text);
    let verbs: BTreeSet<String> = parse_triplet_terms(text)
        .into_iter()
        .filter_map(|(_, r, _)| r.split_whitespace().next().map(str::to_string))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    'scan: while i < tokens.len() {
        for n in (1..=MAX_NGRAM.min(tokens.len() - i)).rev() {
            let gram = tokens[i..i + n].join(" ");
            if let Some(v) = lexicon.virtual_by_slug(&slugify(&gram)) {
                out.push(QueryTerm::Virtual(v.id));
                i += n;
                continue 'scan;
            }
        }
        for n in (2..=MAX_NGRAM.min(tokens.len() - i)).rev() {
            let lemma = lemma_key(&tokens[i..i + n].join(" "));
            if lexicon.has_lemma(&lemma, Pos::Noun) {
                out.push(QueryTerm::Word { lemma, pos: Pos::Noun });
                i += n;
                continue 'scan;
            }
        }
        let t = &tokens[i];
        i += 1;
        if is_stopword(t) {
            continue;
        }
        let pos = if verbs.contains(t) { Pos::Verb } else { Pos::Noun };
        if let Some((lemma, _)) = lookup_term(t, pos, lexicon) {
            out.push(QueryTerm::Word { lemma, pos });
        }
    }
    out
}

/// Renders a text query into a graph over the same lexicon, using the query
/// itself as the disambiguation context.
pub fn query_to_graph(text: &str, lexicon: &LexiconDb) -> Result<QueryGraph, RetrievalError> {
    let mut context = Bag::new();
    context.extend_text(text);
    let mut ids = BTreeSet::new();
    for term in query_terms(text, lexicon) {
        match term {
            QueryTerm::Virtual(id) => {
                ids.insert(id);
            }
            QueryTerm::Word { lemma, pos } => {
                if let Ok(id) = lexicon.lesk_disambiguate(&lemma, pos, &context) {
                    ids.insert(id);
                }
            }
        }
    }
    if ids.is_empty() {
        return Err(RetrievalError::NoKnownTerms(text.to_string()));
    }
    let direct = ids
        .iter()
        .map(|id| (id.clone(), lexicon.depth(id).unwrap_or(0)))
        .collect();
    let nodes = ids.into_iter().map(|id| SynsetNode::direct(id, BTreeMap::new())).collect();
    let mut graph = construct_graph("query", nodes, lexicon);
    graph.fingerprint = lexicon.fingerprint();
    Ok(QueryGraph {
        origin: text.to_string(),
        graph,
        direct,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub score: f64,
    pub matched: Vec<SynsetId>,
    /// Depth sum of the matched nodes.
    pub specificity: u32,
}

/// Share of query-direct nodes present in the video graph.
pub fn overlap_score(query: &QueryGraph, video: &VideoKnowledgeGraph) -> Result<Overlap, RetrievalError> {
    if query.graph.fingerprint != video.fingerprint {
        return Err(RetrievalError::FingerprintMismatch {
            video: video.video_id.clone(),
            expected: query.graph.fingerprint.clone(),
            found: video.fingerprint.clone(),
        });
    }
    let matched: Vec<SynsetId> = query.direct.keys().filter(|id| video.contains(id)).cloned().collect();
    let specificity = matched.iter().map(|id| query.direct[id]).sum();
    let score = if query.direct.is_empty() {
        0.0
    } else {
        matched.len() as f64 / query.direct.len() as f64
    };
    Ok(Overlap {
        score,
        matched,
        specificity,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedFrame {
    pub window: u32,
    pub frame_index: u64,
    /// Matched nodes whose evidence holds the frame.
    pub votes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub video_id: String,
    pub score: f64,
    pub matched: Vec<SynsetId>,
    pub specificity: u32,
    pub frames: Vec<RankedFrame>,
}

/// Frames of the matched nodes' evidence by vote count, then by time.
/// Frame indices grow with time inside a video.
pub fn rank_frames(video: &VideoKnowledgeGraph, matched: &[SynsetId]) -> Vec<RankedFrame> {
    let mut votes: BTreeMap<EvidenceKey, u32> = BTreeMap::new();
    for id in matched {
        if let Some(n) = video.node(id) {
            for k in n.evidence.keys() {
                *votes.entry(*k).or_insert(0) += 1;
            }
        }
    }
    let mut frames: Vec<RankedFrame> = votes
        .into_iter()
        .map(|(k, v)| RankedFrame {
            window: k.window,
            frame_index: k.frame,
            votes: v,
        })
        .collect();
    frames.sort_by(|a, b| b.votes.cmp(&a.votes).then(a.frame_index.cmp(&b.frame_index)).then(a.window.cmp(&b.window)));
    frames
}

/// Score order: score desc, specificity desc, video id asc.
pub fn hit_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.specificity.cmp(&a.specificity))
        .then(a.video_id.cmp(&b.video_id))
}

/// Scores every video graph and keeps the `top_k` best with a positive
/// score. Graphs built over another lexicon are skipped.
pub fn retrieve<'a>(
    query: &QueryGraph,
    videos: impl IntoIterator<Item = &'a VideoKnowledgeGraph>,
    top_k: usize,
) -> Vec<RetrievalHit> {
    let mut hits = Vec::new();
    for v in videos {
        let o = match overlap_score(query, v) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("skipping video: {e}");
                continue;
            }
        };
        if o.score <= 0.0 {
            continue;
        }
        hits.push(RetrievalHit {
            video_id: v.video_id.clone(),
            score: o.score,
            frames: rank_frames(v, &o.matched),
            matched: o.matched,
            specificity: o.specificity,
        });
    }
    hits.sort_by(hit_order);
    hits.truncate(top_k);
    hits
}
