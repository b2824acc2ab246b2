//! Caption sentences to `(subject, relation, object)` triplets: a rule-based
//! pattern parser, pronoun substitution and concreteness filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::FrameCaption;
use crate::pipeline::{Pipe, PipeError};
use crate::text::tokenize;
use crate::window::{keys, DataWindow, FrameRef, InferenceSlot, SlotPayload};

const VERBS_TXT: &str = include_str!("../data/verbs.txt");
const CONCRETENESS_TXT: &str = include_str!("../data/concreteness.txt");

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "another", "several",
    "many", "few", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "my", "your",
    "our", "no",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "near", "under", "over", "above", "below", "behind", "beside", "next", "with", "of", "by",
    "from", "into", "onto", "inside", "outside", "along", "across", "through", "toward", "towards", "around",
    "against", "between", "beneath", "underneath", "atop", "to", "for", "off", "up", "down", "past", "beyond",
    "among",
];
const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "does", "do", "did", "can",
    "could", "will", "would", "may", "might", "should",
];
const PRONOUNS: &[&str] = &[
    "he", "she", "it", "they", "him", "her", "them", "his", "its", "their", "we", "us", "i", "me", "you",
    "himself", "herself", "itself", "themselves",
];
/// Pronouns that act as determiners when a noun phrase follows.
const POSSESSIVES: &[&str] = &["his", "her", "its", "their"];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "while", "as", "then"];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "white", "black", "gray", "grey", "brown", "orange", "pink", "purple",
    "big", "large", "small", "little", "tall", "short", "long", "old", "young", "new", "wooden", "metal",
    "dark", "bright", "empty", "full", "open", "closed", "busy", "wet", "dry", "hot", "cold", "happy", "sad",
    "smiling", "standing", "sitting", "parked", "wet", "clean", "dirty", "round", "square", "tiny", "huge",
    "silver", "golden", "plastic", "glass", "striped", "colorful", "sunny", "cloudy", "blurry", "other",
];
/// Words ending in -ing that are nouns, not participles.
const ING_NOUNS: &[&str] = &["building", "ceiling", "clothing", "painting", "ring", "string", "thing", "king", "wing", "morning", "evening", "sibling", "railing", "awning", "parking", "sling", "swing"];

struct WordClasses {
    verbs: HashSet<String>,
    determiners: HashSet<&'static str>,
    prepositions: HashSet<&'static str>,
    auxiliaries: HashSet<&'static str>,
    pronouns: HashSet<&'static str>,
    conjunctions: HashSet<&'static str>,
    adjectives: HashSet<&'static str>,
    ing_nouns: HashSet<&'static str>,
}

fn classes() -> &'static WordClasses {
    static CLASSES: OnceLock<WordClasses> = OnceLock::new();
    CLASSES.get_or_init(|| {
        let mut verbs = HashSet::new();
        for line in VERBS_TXT.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            for form in line.split_whitespace() {
                verbs.insert(form.to_lowercase());
            }
        }
        for aux in AUXILIARIES {
            verbs.remove(*aux);
        }
        WordClasses {
            verbs,
            determiners: DETERMINERS.iter().copied().collect(),
            prepositions: PREPOSITIONS.iter().copied().collect(),
            auxiliaries: AUXILIARIES.iter().copied().collect(),
            pronouns: PRONOUNS.iter().copied().collect(),
            conjunctions: CONJUNCTIONS.iter().copied().collect(),
            adjectives: ADJECTIVES.iter().copied().collect(),
            ing_nouns: ING_NOUNS.iter().copied().collect(),
        }
    })
}

pub fn is_pronoun(word: &str) -> bool {
    classes().pronouns.contains(word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Det,
    Adj,
    Prep,
    Aux,
    Pron,
    Conj,
    Verb,
    Noun,
}

fn classify(token: &str) -> Class {
    let c = classes();
    if c.determiners.contains(token) || token.chars().all(|ch| ch.is_ascii_digit()) {
        Class::Det
    } else if c.pronouns.contains(token) {
        Class::Pron
    } else if c.auxiliaries.contains(token) {
        Class::Aux
    } else if c.prepositions.contains(token) {
        Class::Prep
    } else if c.conjunctions.contains(token) {
        Class::Conj
    } else if c.verbs.contains(token)
        || (token.len() > 4 && token.ends_with("ing") && !c.ing_nouns.contains(token))
    {
        Class::Verb
    } else if c.adjectives.contains(token) {
        Class::Adj
    } else {
        Class::Noun
    }
}

/// Pronouns are canonicalized by the coreference step; a pronoun that is
/// never resolved drops its triplet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub frame: FrameRef,
    pub caption_index: u32,
}

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
        frame: FrameRef,
        caption_index: u32,
    ) -> Self {
        Self {
            subject: normalize_term(&subject.into()),
            relation: normalize_term(&relation.into()),
            object: normalize_term(&object.into()),
            frame,
            caption_index,
        }
    }

    pub fn terms(&self) -> (&str, &str, &str) {
        (&self.subject, &self.relation, &self.object)
    }
}

/// Lowercased, trimmed, inner whitespace collapsed.
pub fn normalize_term(term: &str) -> String {
    term.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn caption_tokens(sentence: &str) -> Vec<String> {
    tokenize(sentence)
        .into_iter()
        .map(|t| t.strip_suffix("'s").map(str::to_string).unwrap_or(t))
        .filter(|t| !t.is_empty())
        .collect()
}

struct Np {
    head: String,
    end: usize,
}

/// `det? adj* noun+`, or a lone pronoun.
fn parse_np(tokens: &[(String, Class)], start: usize) -> Option<Np> {
    let mut i = start;
    if i >= tokens.len() {
        return None;
    }
    let possessive = tokens[i].1 == Class::Pron
        && POSSESSIVES.contains(&tokens[i].0.as_str())
        && tokens.get(i + 1).is_some_and(|t| matches!(t.1, Class::Adj | Class::Noun));
    if tokens[i].1 == Class::Pron && !possessive {
        return Some(Np {
            head: tokens[i].0.clone(),
            end: i + 1,
        });
    }
    let mut after_det = false;
    if tokens[i].1 == Class::Det || possessive {
        i += 1;
        after_det = true;
    }
    while i < tokens.len() && tokens[i].1 == Class::Adj {
        i += 1;
    }
    let mut head: Option<String> = None;
    while i < tokens.len() {
        let (ref tok, class) = tokens[i];
        let first = head.is_none();
        let accept = match class {
            Class::Noun => true,
            // a verb form directly after a determiner or adjective reads as a
            // noun ("a building", "the bus stop" at the end of a sentence)
            Class::Verb => (first && (after_det || i > start)) || (!first && i + 1 == tokens.len()),
            _ => false,
        };
        if !accept {
            break;
        }
        head = Some(tok.clone());
        i += 1;
    }
    head.map(|head| Np { head, end: i })
}

/// Rule-based triplets of one caption sentence.
///
/// The subject noun phrase owns every later verb phrase and prepositional
/// phrase until a new noun phrase starts a clause.
pub fn parse_triplet_terms(sentence: &str) -> Vec<(String, String, String)> {
    let tokens: Vec<(String, Class)> = caption_tokens(sentence)
        .into_iter()
        .map(|t| {
            let c = classify(&t);
            (t, c)
        })
        .collect();
    let mut out = Vec::new();
    let mut subject: Option<String> = None;
    let mut i = 0;
    while i < tokens.len() {
        let class = tokens[i].1;
        match class {
            Class::Aux | Class::Conj | Class::Adj => i += 1,
            Class::Prep if subject.is_some() => {
                // two-word prepositions such as "next to" collapse to the last one
                let mut j = i;
                while j + 1 < tokens.len() && tokens[j + 1].1 == Class::Prep {
                    j += 1;
                }
                let prep = tokens[i..=j].iter().map(|t| t.0.as_str()).collect::<Vec<_>>().join(" ");
                match parse_np(&tokens, j + 1) {
                    Some(np) => {
                        out.push((subject.clone().unwrap(), prep, np.head));
                        i = np.end;
                    }
                    None => i = j + 1,
                }
            }
            Class::Verb if subject.is_some() => {
                let mut relation = tokens[i].0.clone();
                let mut j = i + 1;
                while j < tokens.len() && tokens[j].1 == Class::Prep {
                    relation.push(' ');
                    relation.push_str(&tokens[j].0);
                    j += 1;
                }
                match parse_np(&tokens, j) {
                    Some(np) => {
                        out.push((subject.clone().unwrap(), relation, np.head));
                        i = np.end;
                    }
                    None => i = j,
                }
            }
            Class::Det | Class::Noun | Class::Pron => match parse_np(&tokens, i) {
                Some(np) => {
                    subject = Some(np.head);
                    i = np.end;
                }
                None => i += 1,
            },
            _ => i += 1,
        }
    }
    out
}

/// Splits a caption paragraph into sentences on `.`, `!`, `?` and `;`.
pub fn caption_sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_triplets(sentence: &str, frame: &FrameRef, caption_index: u32) -> Vec<Triplet> {
    parse_triplet_terms(sentence)
        .into_iter()
        .map(|(s, r, o)| Triplet::new(s, r, o, frame.clone(), caption_index))
        .collect()
}

/// Mention to canonical mention, scoped to one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorefMap {
    map: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorefError {
    #[error("canonical mention {0:?} is a pronoun")]
    PronounCanonical(String),
}

impl CorefMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mention: &str, canonical: &str) -> Result<(), CorefError> {
        let canonical = normalize_term(canonical);
        if is_pronoun(&canonical) {
            return Err(CorefError::PronounCanonical(canonical));
        }
        self.map.insert(normalize_term(mention), canonical);
        Ok(())
    }

    pub fn get(&self, mention: &str) -> Option<&str> {
        self.map.get(mention).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Substitutes mapped mentions, then drops triplets still holding a pronoun.
pub fn resolve_coreferences(triplets: &[Triplet], coref: &CorefMap) -> Vec<Triplet> {
    triplets
        .iter()
        .filter_map(|t| {
            let mut t = t.clone();
            if let Some(c) = coref.get(&t.subject) {
                t.subject = c.to_string();
            }
            if let Some(c) = coref.get(&t.object) {
                t.object = c.to_string();
            }
            (!is_pronoun(&t.subject) && !is_pronoun(&t.object)).then_some(t)
        })
        .collect()
}

/// Builds the coreference map of one frame from its triplets in caption order.
pub trait CorefResolver: Send + Sync {
    fn resolve(&self, triplets: &[Triplet]) -> CorefMap;
}

/// Each pronoun maps to the most recent non-pronoun subject before its first
/// occurrence.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecentSubjectCoref;

impl CorefResolver for RecentSubjectCoref {
    fn resolve(&self, triplets: &[Triplet]) -> CorefMap {
        let mut map = CorefMap::new();
        let mut last: Option<&str> = None;
        for t in triplets {
            for mention in [&t.subject, &t.object] {
                if is_pronoun(mention) && map.get(mention).is_none() {
                    if let Some(c) = last {
                        map.insert(mention, c).expect("antecedent is not a pronoun");
                    }
                }
            }
            if !is_pronoun(&t.subject) {
                last = Some(&t.subject);
            }
        }
        map
    }
}

#[derive(Debug, Error)]
pub enum LexiconLoadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Word (or bigram) concreteness ratings on the 1 to 5 scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConcretenessLexicon {
    ratings: HashMap<String, f64>,
}

impl ConcretenessLexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self {
            ratings: pairs.into_iter().map(|(w, r)| (normalize_term(w), r)).collect(),
        }
    }

    /// Parses `word|rating` lines; `#` comments and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, LexiconLoadError> {
        let mut ratings = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| LexiconLoadError::Parse { line: n + 1, message };
            let (word, rating) = line.split_once('|').ok_or_else(|| err("expected word|rating".into()))?;
            let rating: f64 = rating.trim().parse().map_err(|_| err(format!("bad rating {rating:?}")))?;
            if !(1.0..=5.0).contains(&rating) {
                return Err(err(format!("rating {rating} outside [1, 5]")));
            }
            let word = normalize_term(word);
            if word.is_empty() {
                return Err(err("empty word".into()));
            }
            ratings.insert(word, rating);
        }
        Ok(Self { ratings })
    }

    pub fn from_file(path: &Path) -> Result<Self, LexiconLoadError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The ratings file shipped with the crate.
    pub fn shipped() -> &'static ConcretenessLexicon {
        static LEX: OnceLock<ConcretenessLexicon> = OnceLock::new();
        LEX.get_or_init(|| Self::parse(CONCRETENESS_TXT).expect("shipped concreteness file is valid"))
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Rating of a term; a multiword term falls back to its last word.
    pub fn rating(&self, term: &str) -> Option<f64> {
        let term = normalize_term(term);
        self.ratings.get(&term).copied().or_else(|| {
            let head = term.rsplit(' ').next()?;
            (head != term).then(|| self.ratings.get(head).copied()).flatten()
        })
    }
}

/// Mean rating of subject and object, or `None` when either is unrated.
pub fn mean_concreteness(triplet: &Triplet, lexicon: &ConcretenessLexicon) -> Option<f64> {
    Some((lexicon.rating(&triplet.subject)? + lexicon.rating(&triplet.object)?) / 2.0)
}

/// Keeps triplets whose mean concreteness is at least `tau`.
pub fn filter_triplets(triplets: &[Triplet], lexicon: &ConcretenessLexicon, tau: f64) -> Vec<Triplet> {
    triplets
        .iter()
        .filter(|t| mean_concreteness(t, lexicon).is_some_and(|m| m >= tau))
        .cloned()
        .collect()
}

pub const DEFAULT_TAU: f64 = 3.0;

/// Triplets of one frame's captions, ordered by caption (branch) index.
pub fn frame_triplets(captions: &[&FrameCaption]) -> Vec<Triplet> {
    let mut sorted: Vec<&&FrameCaption> = captions.iter().collect();
    sorted.sort_by_key(|c| c.branch_index);
    let mut out = Vec::new();
    for c in sorted {
        for sentence in caption_sentences(&c.text) {
            out.extend(parse_triplets(&sentence, &c.frame, c.branch_index));
        }
    }
    out
}

/// parse (or adapter triplets) → coreference → concreteness filter, per frame.
pub fn relations_for_frame(
    raw: Vec<Triplet>,
    coref: &dyn CorefResolver,
    lexicon: &ConcretenessLexicon,
    tau: f64,
) -> Vec<Triplet> {
    let map = coref.resolve(&raw);
    filter_triplets(&resolve_coreferences(&raw, &map), lexicon, tau)
}

/// The sentence graph parser pipe: reads `captions` (and adapter
/// `raw_triplets`, which win for frames they cover) and writes `triplets`.
#[derive(Clone)]
pub struct SentenceGraphPipe {
    pub lexicon: Arc<ConcretenessLexicon>,
    pub tau: f64,
    pub coref: Arc<dyn CorefResolver>,
}

impl SentenceGraphPipe {
    pub fn new(lexicon: Arc<ConcretenessLexicon>, tau: f64) -> Self {
        Self {
            lexicon,
            tau,
            coref: Arc::new(RecentSubjectCoref),
        }
    }
}

impl Pipe for SentenceGraphPipe {
    fn name(&self) -> &str {
        "sentence_graph"
    }

    fn reads(&self) -> Vec<String> {
        vec![keys::CAPTIONS.into(), keys::RAW_TRIPLETS.into()]
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::TRIPLETS.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        let mut raw: BTreeMap<u64, Vec<Triplet>> = BTreeMap::new();
        if let Some(SlotPayload::Triplets(ts)) = window.slot(keys::RAW_TRIPLETS).map(|s| &s.payload) {
            for t in ts {
                raw.entry(t.frame.frame_index).or_default().push(t.clone());
            }
        }
        if let Some(SlotPayload::Captions(caps)) = window.slot(keys::CAPTIONS).map(|s| &s.payload) {
            let mut by_frame: BTreeMap<u64, Vec<&FrameCaption>> = BTreeMap::new();
            for c in caps {
                by_frame.entry(c.frame.frame_index).or_default().push(c);
            }
            for (idx, caps) in by_frame {
                raw.entry(idx).or_insert_with(|| frame_triplets(&caps));
            }
        }
        let mut out = Vec::new();
        for (_, ts) in raw {
            out.extend(relations_for_frame(ts, self.coref.as_ref(), &self.lexicon, self.tau));
        }
        Ok(window.put_slot(InferenceSlot::new(keys::TRIPLETS, SlotPayload::Triplets(out), self.name()))?)
    }
}

/// Renders triplets one per line as `frame|caption|subject|relation|object`.
pub fn render_triplets(triplets: &[Triplet]) -> String {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&format!(
            "{}|{}|{}|{}|{}\n",
            t.frame.frame_index, t.caption_index, t.subject, t.relation, t.object
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(s: &str) -> Vec<(String, String, String)> {
        parse_triplet_terms(s)
    }

    fn t3(a: &str, b: &str, c: &str) -> (String, String, String) {
        (a.into(), b.into(), c.into())
    }

    fn fr() -> FrameRef {
        FrameRef::new("v", 0, 0, 0.0)
    }

    #[test]
    fn man_riding_horse() {
        assert_eq!(terms("a man riding a horse"), vec![t3("man", "riding", "horse")]);
    }

    #[test]
    fn no_verb_no_triplet() {
        assert!(terms("the sky").is_empty());
    }

    #[test]
    fn prepositional_attachment_to_subject() {
        let got = terms("a chef in a kitchen holds a knife");
        assert_eq!(got.len(), 2);
        assert!(got.contains(&t3("chef", "holds", "knife")));
        assert!(got.contains(&t3("chef", "in", "kitchen")));
    }

    #[test]
    fn possessive_reads_as_determiner() {
        assert_eq!(terms("he carries a bag on his back"), vec![t3("he", "carries", "bag"), t3("he", "on", "back")]);
        assert_eq!(terms("she feeds her dog"), vec![t3("she", "feeds", "dog")]);
        assert_eq!(terms("a boy holds her"), vec![t3("boy", "holds", "her")]);
    }

    #[test]
    fn verb_with_preposition_and_adjectives() {
        assert_eq!(terms("A red car is parked on the busy street."), vec![t3("car", "parked on", "street")]);
    }

    #[test]
    fn pronoun_substitution() {
        let mut map = CorefMap::new();
        map.insert("it", "man").unwrap();
        let t = Triplet::new("it", "holds", "cup", fr(), 0);
        let r = resolve_coreferences(&[t], &map);
        assert_eq!(r[0].subject, "man");
        assert!(map.clone().insert("x", "he").is_err());
    }

    #[test]
    fn unresolved_pronoun_dropped() {
        let t = Triplet::new("he", "runs", "track", fr(), 0);
        let keep = Triplet::new("dog", "runs", "track", fr(), 0);
        let r = resolve_coreferences(&[t, keep.clone()], &CorefMap::new());
        assert_eq!(r, vec![keep]);
    }

    #[test]
    fn recent_subject_rule() {
        let ts = vec![
            Triplet::new("woman", "holds", "cup", fr(), 0),
            Triplet::new("she", "wears", "hat", fr(), 0),
        ];
        let map = RecentSubjectCoref.resolve(&ts);
        assert_eq!(map.get("she"), Some("woman"));
    }

    #[test]
    fn concreteness_mean() {
        let lex = ConcretenessLexicon::from_pairs([("car", 5.0), ("idea", 1.5)]);
        let t = Triplet::new("car", "near", "idea", fr(), 0);
        assert_eq!(mean_concreteness(&t, &lex), Some(3.25));
        let u = Triplet::new("car", "near", "zzz-unknown", fr(), 0);
        assert_eq!(mean_concreteness(&u, &lex), None);
        let multi = Triplet::new("sports car", "near", "car", fr(), 0);
        assert_eq!(mean_concreteness(&multi, &lex), Some(5.0));
    }

    #[test]
    fn filter_bounds() {
        let lex = ConcretenessLexicon::from_pairs([("car", 5.0), ("idea", 1.5), ("dog", 4.5), ("hope", 1.5)]);
        let a = Triplet::new("car", "near", "idea", fr(), 0);
        let b = Triplet::new("hope", "near", "dog", fr(), 0);
        let mut lex2 = lex.clone();
        lex2.ratings.insert("dog".into(), 2.5);
        assert_eq!(filter_triplets(&[a.clone(), b.clone()], &lex2, 3.0), vec![a.clone()]);
        assert_eq!(filter_triplets(&[a.clone(), b.clone()], &lex, 1.0).len(), 2);
        assert!(filter_triplets(&[a, b], &lex, 5.0 + 1e-9).is_empty());
    }

    #[test]
    fn lexicon_loader_validates() {
        assert!(ConcretenessLexicon::parse("car|5.0\nidea|1.5\n").is_ok());
        match ConcretenessLexicon::parse("car|5.0\nbad|7\n") {
            Err(LexiconLoadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(ConcretenessLexicon::parse("car 5\n").is_err());
    }

    #[test]
    fn shipped_lexicon_loads() {
        assert!(ConcretenessLexicon::shipped().len() > 100);
    }
}
