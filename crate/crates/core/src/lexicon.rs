//! Dictionary annotator.
//!
//! Terms are matched case-insensitively on word boundaries, where a boundary
//! is any transition between `[a-z0-9]` and anything else after lowercasing.
//! Whitespace runs in the text collapse to a single space, so a multi-word
//! term matches across line breaks and repeated spaces. There is no stemming.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use serde::Serialize;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Post;
use crate::labels::{DisorderLabel, LabelSet};

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon file is empty")]
    Empty,
    #[error("lexicon is not a JSON object of string arrays: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unknown disorder key `{0}` in lexicon")]
    UnknownKey(String),
    #[error("empty term in `{0}` dictionary")]
    EmptyTerm(&'static str),
}

/// Per-disorder term dictionaries. All nine disorders are always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<DisorderLabel, BTreeSet<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            entries: DisorderLabel::DISORDERS
                .into_iter()
                .map(|d| (d, BTreeSet::new()))
                .collect(),
        }
    }
}

/// Lowercases, NFC-normalizes and collapses whitespace in a term.
pub fn normalize_term(term: &str) -> String {
    let lowered: String = term.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Lexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw)
    }

    pub fn from_json(raw: &str) -> Result<Self, LexiconError> {
        if raw.trim().is_empty() {
            return Err(LexiconError::Empty);
        }
        let parsed: BTreeMap<String, Vec<String>> = serde_json::from_str(raw)?;
        let mut lexicon = Lexicon::default();
        for (key, terms) in parsed {
            let disorder = DisorderLabel::DISORDERS
                .into_iter()
                .find(|d| d.key() == key)
                .ok_or_else(|| LexiconError::UnknownKey(key.clone()))?;
            for term in terms {
                lexicon.insert(disorder, &term)?;
            }
        }
        Ok(lexicon)
    }

    /// Adds a term; `None` is not a valid dictionary.
    pub fn insert(&mut self, disorder: DisorderLabel, term: &str) -> Result<(), LexiconError> {
        if disorder.is_none() {
            return Err(LexiconError::UnknownKey("none".into()));
        }
        let term = normalize_term(term);
        if term.is_empty() {
            return Err(LexiconError::EmptyTerm(disorder.key()));
        }
        self.entries.entry(disorder).or_default().insert(term);
        Ok(())
    }

    pub fn terms(&self, disorder: DisorderLabel) -> impl Iterator<Item = &str> {
        self.entries
            .get(&disorder)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn entries(&self) -> impl Iterator<Item = (DisorderLabel, &BTreeSet<String>)> {
        self.entries.iter().map(|(d, t)| (*d, t))
    }

    pub fn term_count(&self) -> usize {
        self.entries.values().map(BTreeSet::len).sum()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &BTreeSet<String>> =
            self.entries.iter().map(|(d, t)| (d.key(), t)).collect();
        serde_json::to_string_pretty(&map).expect("lexicon serializes")
    }

    pub fn matcher(&self) -> DictionaryMatcher {
        DictionaryMatcher::new(self)
    }
}

/// One term occurrence. `offset` is a character offset into the post text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Hit {
    pub offset: usize,
    pub term: String,
    pub disorder: DisorderLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub labels: LabelSet,
    pub hits: Vec<Hit>,
}

/// Text prepared for matching, with a map back to original char offsets.
pub struct FoldedText {
    pub text: String,
    /// For every byte of `text`, the char offset in the source.
    origin: Vec<usize>,
}

impl FoldedText {
    pub fn new(source: &str) -> Self {
        let mut text = String::with_capacity(source.len());
        let mut origin = Vec::with_capacity(source.len());
        let mut pending_space = false;
        for (char_idx, c) in source.chars().enumerate() {
            if c.is_whitespace() {
                if !text.is_empty() {
                    pending_space = true;
                }
                continue;
            }
            if pending_space {
                text.push(' ');
                origin.push(char_idx - 1);
                pending_space = false;
            }
            for lc in c.to_lowercase() {
                let before = text.len();
                text.push(lc);
                origin.extend(std::iter::repeat_n(char_idx, text.len() - before));
            }
        }
        Self { text, origin }
    }

    pub fn source_offset(&self, byte: usize) -> usize {
        self.origin[byte]
    }

    /// True when `[start, end)` is delimited by non-`[a-z0-9]` chars or edges.
    pub fn on_boundaries(&self, start: usize, end: usize) -> bool {
        is_word_boundary(&self.text, start, end)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit()
}

pub(crate) fn is_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start]
        .chars()
        .next_back()
        .is_none_or(|c| !is_word_char(c));
    let after = text[end..].chars().next().is_none_or(|c| !is_word_char(c));
    before && after
}

/// Compiled multi-pattern matcher over a [`Lexicon`]. Immutable and `Sync`.
pub struct DictionaryMatcher {
    automaton: Option<AhoCorasick>,
    patterns: Vec<(String, Vec<DisorderLabel>)>,
}

impl DictionaryMatcher {
    pub fn new(lexicon: &Lexicon) -> Self {
        let mut by_term: BTreeMap<&str, Vec<DisorderLabel>> = BTreeMap::new();
        for (disorder, terms) in lexicon.entries() {
            for term in terms {
                by_term.entry(term.as_str()).or_default().push(disorder);
            }
        }
        let patterns: Vec<(String, Vec<DisorderLabel>)> = by_term
            .into_iter()
            .map(|(t, d)| (t.to_string(), d))
            .collect();
        let automaton = if patterns.is_empty() {
            None
        } else {
            Some(
                AhoCorasickBuilder::new()
                    .match_kind(MatchKind::Standard)
                    .build(patterns.iter().map(|(t, _)| t.as_str()))
                    .expect("lexicon terms compile"),
            )
        };
        Self {
            automaton,
            patterns,
        }
    }

    pub fn annotate_text(&self, text: &str) -> MatchResult {
        let mut hits = Vec::new();
        if let Some(ac) = &self.automaton {
            let folded = FoldedText::new(text);
            // Overlapping search: a boundary-rejected long match must not hide
            // a valid shorter one.
            for m in ac.find_overlapping_iter(&folded.text) {
                if !folded.on_boundaries(m.start(), m.end()) {
                    continue;
                }
                let (term, disorders) = &self.patterns[m.pattern().as_usize()];
                let offset = folded.source_offset(m.start());
                for &disorder in disorders {
                    hits.push(Hit {
                        offset,
                        term: term.clone(),
                        disorder,
                    });
                }
            }
        }
        hits.sort();
        let labels = hits.iter().map(|h| h.disorder).collect();
        MatchResult { labels, hits }
    }
}

pub fn annotate_dictionary(post: &Post, matcher: &DictionaryMatcher) -> MatchResult {
    matcher.annotate_text(post.text())
}
