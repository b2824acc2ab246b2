//! Tokenization, the shipped stoplist and word multisets.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

const STOPWORDS_TXT: &str = include_str!("../data/stopwords.txt");

/// Parses a one-entry-per-line list; `#` starts a comment line.
pub fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

pub fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| parse_word_list(STOPWORDS_TXT))
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Lowercased alphanumeric tokens. Apostrophes inside a word are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Tokens with stopwords removed.
pub fn content_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// A multiset of words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bag {
    counts: BTreeMap<String, usize>,
}

impl Bag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: impl Into<String>) {
        *self.counts.entry(word.into()).or_insert(0) += 1;
    }

    pub fn extend_text(&mut self, text: &str) {
        for w in content_words(text) {
            self.add(w);
        }
    }

    pub fn extend_bag(&mut self, other: &Bag) {
        for (w, c) in &other.counts {
            *self.counts.entry(w.clone()).or_insert(0) += c;
        }
    }

    pub fn count(&self, word: &str) -> usize {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(w, c)| (w.as_str(), *c))
    }

    /// Size of the multiset intersection: sum of per-word minimum counts.
    pub fn intersection_size(&self, other: &Bag) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.counts.iter().map(|(w, c)| (*c).min(large.count(w))).sum()
    }
}

impl<S: Into<String>> FromIterator<S> for Bag {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut bag = Bag::new();
        for w in iter {
            bag.add(w);
        }
        bag
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_and_strips_stopwords() {
        assert_eq!(tokenize("The car's engine, STOPPED!"), vec!["the", "car's", "engine", "stopped"]);
        assert_eq!(content_words("the red car stopped"), vec!["red", "car", "stopped"]);
    }

    #[test]
    fn multiset_intersection() {
        let a: Bag = ["river", "river", "water"].into_iter().collect();
        let b: Bag = ["river", "water", "water", "bank"].into_iter().collect();
        assert_eq!(a.intersection_size(&b), 2);
        assert_eq!(b.intersection_size(&a), 2);
    }
}
