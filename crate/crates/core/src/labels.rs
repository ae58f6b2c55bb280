//! Disorder taxonomy and label sets.
//!
//! A [`LabelSet`] stores the nine disorders as a bit set. The empty set is the
//! `None` outcome, so `None` can never be combined with a disorder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown disorder label `{0}`")]
pub struct UnknownLabel(pub String);

/// One of the nine disorder labels, or `None` for "no disorder detected".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DisorderLabel {
    Adhd,
    Autism,
    Anxiety,
    Bipolar,
    Depression,
    EatingDisorder,
    Ocd,
    Ptsd,
    Schizophrenia,
    None,
}

impl DisorderLabel {
    /// The nine disorders in label-vector order.
    pub const DISORDERS: [DisorderLabel; 9] = [
        DisorderLabel::Adhd,
        DisorderLabel::Autism,
        DisorderLabel::Anxiety,
        DisorderLabel::Bipolar,
        DisorderLabel::Depression,
        DisorderLabel::EatingDisorder,
        DisorderLabel::Ocd,
        DisorderLabel::Ptsd,
        DisorderLabel::Schizophrenia,
    ];

    /// The nine disorders followed by `None`.
    pub const ALL: [DisorderLabel; 10] = [
        DisorderLabel::Adhd,
        DisorderLabel::Autism,
        DisorderLabel::Anxiety,
        DisorderLabel::Bipolar,
        DisorderLabel::Depression,
        DisorderLabel::EatingDisorder,
        DisorderLabel::Ocd,
        DisorderLabel::Ptsd,
        DisorderLabel::Schizophrenia,
        DisorderLabel::None,
    ];

    /// Lowercase key used in lexicon files and exchange formats.
    pub fn key(self) -> &'static str {
        match self {
            DisorderLabel::Adhd => "adhd",
            DisorderLabel::Autism => "autism",
            DisorderLabel::Anxiety => "anxiety",
            DisorderLabel::Bipolar => "bipolar",
            DisorderLabel::Depression => "depression",
            DisorderLabel::EatingDisorder => "eating_disorder",
            DisorderLabel::Ocd => "ocd",
            DisorderLabel::Ptsd => "ptsd",
            DisorderLabel::Schizophrenia => "schizophrenia",
            DisorderLabel::None => "none",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DisorderLabel::Adhd => "ADHD",
            DisorderLabel::Autism => "Autism",
            DisorderLabel::Anxiety => "Anxiety",
            DisorderLabel::Bipolar => "Bipolar",
            DisorderLabel::Depression => "Depression",
            DisorderLabel::EatingDisorder => "EatingDisorder",
            DisorderLabel::Ocd => "OCD",
            DisorderLabel::Ptsd => "PTSD",
            DisorderLabel::Schizophrenia => "Schizophrenia",
            DisorderLabel::None => "None",
        }
    }

    /// Position in the 9-long label vector; `None` has no position.
    pub fn index(self) -> Option<usize> {
        DisorderLabel::DISORDERS.iter().position(|&d| d == self)
    }

    pub fn is_none(self) -> bool {
        self == DisorderLabel::None
    }
}

impl fmt::Display for DisorderLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for DisorderLabel {
    type Err = UnknownLabel;

    /// Accepts the lowercase key or the display name, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        DisorderLabel::ALL
            .iter()
            .copied()
            .find(|l| {
                l.key().eq_ignore_ascii_case(wanted)
                    || l.display_name().eq_ignore_ascii_case(wanted)
            })
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

impl Serialize for DisorderLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for DisorderLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of disorder labels. Empty means `{None}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelSet(u16);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelSetError {
    #[error(transparent)]
    Unknown(#[from] UnknownLabel),
    #[error("`none` cannot be combined with disorder labels")]
    NoneCombined,
}

impl LabelSet {
    pub const fn none() -> Self {
        LabelSet(0)
    }

    pub fn from_bits(bits: u16) -> Self {
        LabelSet(bits & 0x1ff)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }

    /// Number of disorders in the set (0 for `{None}`).
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.is_none()
    }

    /// Inserting `None` is a no-op.
    pub fn insert(&mut self, label: DisorderLabel) {
        if let Some(i) = label.index() {
            self.0 |= 1 << i;
        }
    }

    pub fn contains(self, label: DisorderLabel) -> bool {
        match label.index() {
            Some(i) => self.0 & (1 << i) != 0,
            None => self.is_none(),
        }
    }

    /// The disorders present, in label-vector order.
    pub fn disorders(self) -> impl Iterator<Item = DisorderLabel> {
        DisorderLabel::DISORDERS
            .into_iter()
            .filter(move |d| self.contains(*d))
    }

    /// Like [`disorders`](Self::disorders) but yields `None` for the empty set.
    pub fn labels(self) -> Vec<DisorderLabel> {
        if self.is_none() {
            vec![DisorderLabel::None]
        } else {
            self.disorders().collect()
        }
    }

    pub fn vector(self) -> [u8; 9] {
        let mut v = [0u8; 9];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = ((self.0 >> i) & 1) as u8;
        }
        v
    }

    /// Parses label strings, rejecting `none` mixed with disorders.
    pub fn parse_labels<I, S>(labels: I) -> Result<Self, LabelSetError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = LabelSet::none();
        let mut saw_none = false;
        for s in labels {
            let label: DisorderLabel = s.as_ref().parse()?;
            if label.is_none() {
                saw_none = true;
            } else {
                set.insert(label);
            }
        }
        if saw_none && !set.is_none() {
            return Err(LabelSetError::NoneCombined);
        }
        Ok(set)
    }
}

impl FromIterator<DisorderLabel> for LabelSet {
    fn from_iter<T: IntoIterator<Item = DisorderLabel>>(iter: T) -> Self {
        let mut set = LabelSet::none();
        for l in iter {
            set.insert(l);
        }
        set
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.labels().iter().map(|l| l.display_name()).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.labels().iter())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<String>::deserialize(deserializer)?;
        LabelSet::parse_labels(raw).map_err(serde::de::Error::custom)
    }
}
