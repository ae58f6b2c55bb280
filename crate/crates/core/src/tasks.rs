//! Prompt templates and response parsers for the LLM tasks.
//!
//! Templates and synonym tables are data: a pack directory holds one TOML
//! file per task plus `synonyms.toml`. Pack `v1` is compiled in.
//!
//! Every parser is total and pure. Unusable responses map to the `Other`
//! variants, `{None}`, or an empty list.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Post;
use crate::labels::{DisorderLabel, LabelSet};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("template {task}/{version}: user pattern must contain {{post_text}} exactly once (found {found})")]
    Placeholder {
        task: TaskKind,
        version: String,
        found: usize,
    },
    #[error("unknown prompt version `{0}`")]
    UnknownVersion(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("prompt pack {version} is missing the {task} template")]
    MissingTemplate { version: String, task: TaskKind },
}

pub const PLACEHOLDER: &str = "{post_text}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Disorder,
    Severity,
    RecommendTherapy,
    RecommendBehavior,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Binary,
        TaskKind::Disorder,
        TaskKind::Severity,
        TaskKind::RecommendTherapy,
        TaskKind::RecommendBehavior,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Disorder => "disorder",
            TaskKind::Severity => "severity",
            TaskKind::RecommendTherapy => "recommend_therapy",
            TaskKind::RecommendBehavior => "recommend_behavior",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    /// Also accepts the short names `therapy` and `behavior`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "disorder" => Ok(TaskKind::Disorder),
            "severity" => Ok(TaskKind::Severity),
            "therapy" | "recommend_therapy" => Ok(TaskKind::RecommendTherapy),
            "behavior" | "behaviour" | "recommend_behavior" => Ok(TaskKind::RecommendBehavior),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Result taxonomies

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryVerdict {
    Yes,
    No,
    Other,
}

impl BinaryVerdict {
    pub const ALL: [BinaryVerdict; 3] =
        [BinaryVerdict::Yes, BinaryVerdict::No, BinaryVerdict::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            BinaryVerdict::Yes => "Yes",
            BinaryVerdict::No => "No",
            BinaryVerdict::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityLevel {
    Mild,
    Moderate,
    Severe,
    Other,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 4] = [
        SeverityLevel::Mild,
        SeverityLevel::Moderate,
        SeverityLevel::Severe,
        SeverityLevel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityLevel::Mild => "Mild",
            SeverityLevel::Moderate => "Moderate",
            SeverityLevel::Severe => "Severe",
            SeverityLevel::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TherapyCode {
    Cbt,
    Dbt,
    Act,
    Pt,
    Mbsr,
    Mbct,
    Ipt,
    Et,
    Mi,
    Ft,
    /// Any therapy outside the ten named ones.
    Ot,
    /// No therapy: the response only advises seeking professional help.
    Nt,
}

impl TherapyCode {
    pub const ALL: [TherapyCode; 12] = [
        TherapyCode::Cbt,
        TherapyCode::Dbt,
        TherapyCode::Act,
        TherapyCode::Pt,
        TherapyCode::Mbsr,
        TherapyCode::Mbct,
        TherapyCode::Ipt,
        TherapyCode::Et,
        TherapyCode::Mi,
        TherapyCode::Ft,
        TherapyCode::Ot,
        TherapyCode::Nt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TherapyCode::Cbt => "CBT",
            TherapyCode::Dbt => "DBT",
            TherapyCode::Act => "ACT",
            TherapyCode::Pt => "PT",
            TherapyCode::Mbsr => "MBSR",
            TherapyCode::Mbct => "MBCT",
            TherapyCode::Ipt => "IPT",
            TherapyCode::Et => "ET",
            TherapyCode::Mi => "MI",
            TherapyCode::Ft => "FT",
            TherapyCode::Ot => "OT",
            TherapyCode::Nt => "NT",
        }
    }
}

impl FromStr for TherapyCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TherapyCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown therapy code `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TherapyRecommendation {
    pub code: TherapyCode,
    pub name_as_written: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_pct: Option<f64>,
}

// ---------------------------------------------------------------------------
// Templates

fn default_budget() -> usize {
    6000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub task: TaskKind,
    pub version: String,
    pub system: String,
    pub user_pattern: String,
    /// Post text longer than this many chars is truncated.
    #[serde(default = "default_budget")]
    pub max_post_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    pub truncated: bool,
}

impl PromptTemplate {
    pub fn new(
        task: TaskKind,
        version: &str,
        system: &str,
        user_pattern: &str,
    ) -> Result<Self, TaskError> {
        let t = Self {
            task,
            version: version.to_string(),
            system: system.to_string(),
            user_pattern: user_pattern.to_string(),
            max_post_chars: default_budget(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let found = self.user_pattern.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(TaskError::Placeholder {
                task: self.task,
                version: self.version.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn render_text(&self, text: &str) -> RenderedPrompt {
        let (body, truncated) = match text.char_indices().nth(self.max_post_chars) {
            Some((cut, _)) => (&text[..cut], true),
            None => (text, false),
        };
        RenderedPrompt {
            system: self.system.clone(),
            user: self.user_pattern.replacen(PLACEHOLDER, body, 1),
            truncated,
        }
    }

    pub fn render(&self, post: &Post) -> RenderedPrompt {
        self.render_text(post.text())
    }
}

/// One prompt version: a template per task plus the parser tables.
#[derive(Debug, Clone)]
pub struct TemplatePack {
    version: String,
    templates: BTreeMap<TaskKind, PromptTemplate>,
    parsers: ResponseParser,
}

const BUILTIN_VERSION: &str = "v1";
const BUILTIN: [(TaskKind, &str); 5] = [
    (TaskKind::Binary, include_str!("../prompts/v1/binary.toml")),
    (
        TaskKind::Disorder,
        include_str!("../prompts/v1/disorder.toml"),
    ),
    (
        TaskKind::Severity,
        include_str!("../prompts/v1/severity.toml"),
    ),
    (
        TaskKind::RecommendTherapy,
        include_str!("../prompts/v1/recommend_therapy.toml"),
    ),
    (
        TaskKind::RecommendBehavior,
        include_str!("../prompts/v1/recommend_behavior.toml"),
    ),
];
const BUILTIN_SYNONYMS: &str = include_str!("../prompts/v1/synonyms.toml");

impl TemplatePack {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(task, raw)| {
                let t =
                    parse_template(&format!("builtin/{task}.toml"), raw, *task, BUILTIN_VERSION)
                        .expect("builtin template is valid");
                (*task, t)
            })
            .collect();
        Self {
            version: BUILTIN_VERSION.to_string(),
            templates,
            parsers: ResponseParser::default(),
        }
    }

    /// Loads `<root>/<version>/` when `root` is given and that directory
    /// exists, else falls back to the compiled-in pack for `v1`.
    pub fn resolve(version: &str, root: Option<&Path>) -> Result<Self, TaskError> {
        if let Some(root) = root {
            let dir = root.join(version);
            if dir.is_dir() {
                return Self::load_dir(&dir, version);
            }
        }
        if version == BUILTIN_VERSION {
            Ok(Self::builtin())
        } else {
            Err(TaskError::UnknownVersion(version.to_string()))
        }
    }

    pub fn load_dir(dir: &Path, version: &str) -> Result<Self, TaskError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| TaskError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut templates = BTreeMap::new();
        for task in TaskKind::ALL {
            let name = format!("{task}.toml");
            let path = dir.join(&name);
            if !path.exists() {
                return Err(TaskError::MissingTemplate {
                    version: version.to_string(),
                    task,
                });
            }
            let raw = read(&name)?;
            templates.insert(
                task,
                parse_template(&path.display().to_string(), &raw, task, version)?,
            );
        }
        let parsers = if dir.join("synonyms.toml").exists() {
            let raw = read("synonyms.toml")?;
            ResponseParser::from_toml(&raw).map_err(|message| TaskError::Format {
                path: dir.join("synonyms.toml").display().to_string(),
                message,
            })?
        } else {
            ResponseParser::default()
        };
        Ok(Self {
            version: version.to_string(),
            templates,
            parsers,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn template(&self, task: TaskKind) -> &PromptTemplate {
        &self.templates[&task]
    }

    pub fn parsers(&self) -> &ResponseParser {
        &self.parsers
    }
}

fn parse_template(
    path: &str,
    raw: &str,
    task: TaskKind,
    version: &str,
) -> Result<PromptTemplate, TaskError> {
    let mut t: PromptTemplate = toml::from_str(raw).map_err(|e| TaskError::Format {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    if t.task != task || t.version != version {
        return Err(TaskError::Format {
            path: path.to_string(),
            message: format!(
                "declares {}/{} but is loaded as {task}/{version}",
                t.task, t.version
            ),
        });
    }
    t.system = t.system.trim().to_string();
    t.user_pattern = t.user_pattern.trim().to_string();
    t.validate()?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// Tokens and phrase matching

/// An alphanumeric run with its byte span in the source.
#[derive(Debug, Clone)]
struct Token {
    lower: String,
    start: usize,
    end: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push(Token {
                    lower: text[s..i].to_lowercase(),
                    start: s,
                    end: i,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            lower: text[s..].to_lowercase(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

#[derive(Debug, Clone)]
struct Phrase<P> {
    words: Vec<String>,
    /// Compare against the raw token text instead of the lowercased one.
    exact_case: bool,
    payload: P,
}

#[derive(Debug, Clone)]
struct PhraseMatch<P> {
    first: usize,
    len: usize,
    payload: P,
}

#[derive(Debug, Clone)]
struct PhraseTable<P> {
    phrases: Vec<Phrase<P>>,
}

impl<P: Copy> PhraseTable<P> {
    fn new() -> Self {
        Self {
            phrases: Vec::new(),
        }
    }

    fn add(&mut self, phrase: &str, exact_case: bool, payload: P) {
        let words: Vec<String> = tokenize(phrase)
            .into_iter()
            .map(|t| {
                if exact_case {
                    phrase[t.start..t.end].to_string()
                } else {
                    t.lower
                }
            })
            .collect();
        if !words.is_empty() {
            self.phrases.push(Phrase {
                words,
                exact_case,
                payload,
            });
        }
    }

    /// Leftmost-longest, non-overlapping matches in token order.
    fn find(&self, text: &str, tokens: &[Token]) -> Vec<PhraseMatch<P>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let best = self
                .phrases
                .iter()
                .filter(|p| {
                    p.words.len() <= tokens.len() - i
                        && p.words.iter().zip(&tokens[i..]).all(|(w, t)| {
                            if p.exact_case {
                                &text[t.start..t.end] == w
                            } else {
                                &t.lower == w
                            }
                        })
                })
                .max_by_key(|p| p.words.len());
            match best {
                Some(p) => {
                    out.push(PhraseMatch {
                        first: i,
                        len: p.words.len(),
                        payload: p.payload,
                    });
                    i += p.words.len();
                }
                None => i += 1,
            }
        }
        out
    }

    fn any(&self, text: &str, tokens: &[Token]) -> bool {
        !self.find(text, tokens).is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parser tables

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynonymsDoc {
    disorders: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    disorder_abbreviations: BTreeMap<String, Vec<String>>,
    self_harm: PhraseList,
    severity: SeverityDoc,
    therapies: BTreeMap<String, TherapyDoc>,
    other_therapy: OtherTherapyDoc,
    no_therapy: PhraseList,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhraseList {
    phrases: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeverityDoc {
    severe: Vec<String>,
    moderate: Vec<String>,
    mild: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TherapyDoc {
    names: Vec<String>,
    #[serde(default)]
    abbreviations: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OtherTherapyDoc {
    names: Vec<String>,
    heads: Vec<String>,
    stopwords: Vec<String>,
}

/// Compiled synonym tables for the disorder, severity and therapy parsers.
#[derive(Debug, Clone)]
pub struct ResponseParser {
    disorders: PhraseTable<DisorderLabel>,
    self_harm: PhraseTable<()>,
    severity: PhraseTable<SeverityLevel>,
    therapies: PhraseTable<TherapyCode>,
    therapy_heads: Vec<String>,
    therapy_stopwords: Vec<String>,
    no_therapy: PhraseTable<()>,
}

impl Default for ResponseParser {
    fn default() -> Self {
        static DEFAULT: OnceLock<ResponseParser> = OnceLock::new();
        DEFAULT
            .get_or_init(|| {
                ResponseParser::from_toml(BUILTIN_SYNONYMS).expect("builtin synonyms are valid")
            })
            .clone()
    }
}

fn disorder_key(key: &str) -> Result<DisorderLabel, String> {
    DisorderLabel::DISORDERS
        .into_iter()
        .find(|d| d.key() == key)
        .ok_or_else(|| format!("unknown disorder key `{key}`"))
}

impl ResponseParser {
    pub fn from_toml(raw: &str) -> Result<Self, String> {
        let doc: SynonymsDoc = toml::from_str(raw).map_err(|e| e.to_string())?;
        let mut disorders = PhraseTable::new();
        for (key, names) in &doc.disorders {
            let d = disorder_key(key)?;
            for n in names {
                disorders.add(n, false, d);
            }
        }
        for (key, abbrs) in &doc.disorder_abbreviations {
            let d = disorder_key(key)?;
            for a in abbrs {
                disorders.add(a, true, d);
            }
        }
        let mut self_harm = PhraseTable::new();
        for p in &doc.self_harm.phrases {
            self_harm.add(p, false, ());
        }
        let mut severity = PhraseTable::new();
        for (level, words) in [
            (SeverityLevel::Severe, &doc.severity.severe),
            (SeverityLevel::Moderate, &doc.severity.moderate),
            (SeverityLevel::Mild, &doc.severity.mild),
        ] {
            for w in words {
                severity.add(w, false, level);
            }
        }
        let mut therapies = PhraseTable::new();
        for (key, t) in &doc.therapies {
            let code: TherapyCode = key.parse()?;
            if matches!(code, TherapyCode::Ot | TherapyCode::Nt) {
                return Err(format!("`{key}` is reserved"));
            }
            for n in &t.names {
                therapies.add(n, false, code);
            }
            for a in &t.abbreviations {
                therapies.add(a, true, code);
            }
        }
        for n in &doc.other_therapy.names {
            therapies.add(n, false, TherapyCode::Ot);
        }
        let mut no_therapy = PhraseTable::new();
        for p in &doc.no_therapy.phrases {
            no_therapy.add(p, false, ());
        }
        let lower = |v: &[String]| {
            v.iter()
                .map(|s| s.trim().to_lowercase())
                .collect::<Vec<_>>()
        };
        Ok(Self {
            disorders,
            self_harm,
            severity,
            therapies,
            therapy_heads: lower(&doc.other_therapy.heads),
            therapy_stopwords: lower(&doc.other_therapy.stopwords),
            no_therapy,
        })
    }

    pub fn parse_disorders(&self, raw: &str) -> LabelSet {
        self.parse_disorders_detailed(raw).labels
    }

    /// Whitelisted labels, plus a self-harm flag raised only when no label
    /// matched but the response mentions suicide or self-harm.
    pub fn parse_disorders_detailed(&self, raw: &str) -> DisorderParse {
        let tokens = tokenize(raw);
        let labels: LabelSet = self
            .disorders
            .find(raw, &tokens)
            .into_iter()
            .map(|m| m.payload)
            .collect();
        let self_harm = labels.is_none() && self.self_harm.any(raw, &tokens);
        DisorderParse { labels, self_harm }
    }

    /// First category found in priority order severe, moderate, mild.
    pub fn parse_severity(&self, raw: &str) -> SeverityLevel {
        let tokens = tokenize(raw);
        let found: Vec<SeverityLevel> = self
            .severity
            .find(raw, &tokens)
            .into_iter()
            .map(|m| m.payload)
            .collect();
        [
            SeverityLevel::Severe,
            SeverityLevel::Moderate,
            SeverityLevel::Mild,
        ]
        .into_iter()
        .find(|l| found.contains(l))
        .unwrap_or(SeverityLevel::Other)
    }

    pub fn parse_therapies(&self, raw: &str) -> Vec<TherapyRecommendation> {
        let tokens = tokenize(raw);
        // (byte start, byte end, code)
        let mut mentions: Vec<(usize, usize, TherapyCode)> = Vec::new();
        let mut covered = vec![false; tokens.len()];
        for m in self.therapies.find(raw, &tokens) {
            let last = m.first + m.len - 1;
            covered[m.first..=last].iter_mut().for_each(|c| *c = true);
            mentions.push((tokens[m.first].start, tokens[last].end, m.payload));
        }
        // "no therapy" names an outcome, not an unnamed therapy.
        for m in self.no_therapy.find(raw, &tokens) {
            covered[m.first..m.first + m.len]
                .iter_mut()
                .for_each(|c| *c = true);
        }
        for (i, tok) in tokens.iter().enumerate() {
            if covered[i] || !self.therapy_heads.contains(&tok.lower) {
                continue;
            }
            if let Some(first) = self.leading_words(raw, &tokens, &covered, i) {
                mentions.push((tokens[first].start, tok.end, TherapyCode::Ot));
            }
        }
        mentions.sort_by_key(|m| m.0);

        let mut out: Vec<TherapyRecommendation> = Vec::new();
        for (k, &(start, end, code)) in mentions.iter().enumerate() {
            let window_end = mentions.get(k + 1).map_or(raw.len(), |next| next.0);
            let confidence = adjacent_percent(&raw[end..window_end]);
            let name = raw[start..end].to_string();
            let existing = out.iter_mut().find(|r| {
                r.code == code
                    && (code != TherapyCode::Ot || r.name_as_written.eq_ignore_ascii_case(&name))
            });
            match existing {
                Some(r) => {
                    if r.confidence_pct.is_none() {
                        r.confidence_pct = confidence;
                    }
                }
                None => out.push(TherapyRecommendation {
                    code,
                    name_as_written: name,
                    confidence_pct: confidence,
                }),
            }
        }
        if out.is_empty() {
            if let Some(m) = self.no_therapy.find(raw, &tokens).first() {
                let last = m.first + m.len - 1;
                let end = tokens[last].end;
                out.push(TherapyRecommendation {
                    code: TherapyCode::Nt,
                    name_as_written: raw[tokens[m.first].start..end].to_string(),
                    confidence_pct: adjacent_percent(&raw[end..]),
                });
            }
        }
        out
    }

    /// Walks back from a head word over at most three plain words joined by
    /// spaces or hyphens; returns the first word's token index.
    fn leading_words(
        &self,
        raw: &str,
        tokens: &[Token],
        covered: &[bool],
        head: usize,
    ) -> Option<usize> {
        let mut first = None;
        let mut i = head;
        while i > 0 && head - i < 3 {
            let prev = &tokens[i - 1];
            let gap = &raw[prev.end..tokens[i].start];
            let joined = !gap.is_empty() && gap.chars().all(|c| c == ' ' || c == '-');
            let plain = prev.lower.chars().all(char::is_alphabetic);
            if !joined || !plain || covered[i - 1] || self.therapy_stopwords.contains(&prev.lower) {
                break;
            }
            first = Some(i - 1);
            i -= 1;
        }
        first
    }
}

/// The first `NN%` in `window` before a line break; values above 100 are dropped.
fn adjacent_percent(window: &str) -> Option<f64> {
    static PCT: OnceLock<Regex> = OnceLock::new();
    let re = PCT.get_or_init(|| Regex::new(r"(\d{1,3}(?:\.\d+)?)\s*%").expect("percent regex"));
    let line = window.split('\n').next().unwrap_or("");
    let caps = re.captures(line)?;
    let value: f64 = caps[1].parse().ok()?;
    (0.0..=100.0).contains(&value).then_some(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisorderParse {
    pub labels: LabelSet,
    pub self_harm: bool,
}

/// `Yes`/`No` when the first alphabetic token is `yes`/`no`, else `Other`.
pub fn parse_binary(raw: &str) -> BinaryVerdict {
    let first = raw
        .split(|c: char| !c.is_alphabetic())
        .find(|t| !t.is_empty())
        .map(str::to_lowercase);
    match first.as_deref() {
        Some("yes") => BinaryVerdict::Yes,
        Some("no") => BinaryVerdict::No,
        _ => BinaryVerdict::Other,
    }
}

pub fn parse_disorders(raw: &str) -> LabelSet {
    ResponseParser::default().parse_disorders(raw)
}

pub fn parse_severity(raw: &str) -> SeverityLevel {
    ResponseParser::default().parse_severity(raw)
}

pub fn parse_therapies(raw: &str) -> Vec<TherapyRecommendation> {
    ResponseParser::default().parse_therapies(raw)
}

fn strip_markdown(s: &str) -> String {
    s.replace("**", "")
        .replace("__", "")
        .replace('`', "")
        .trim()
        .to_string()
}

/// List items when the response has numbered or bulleted lines, otherwise
/// sentences (with their closing punctuation).
pub fn parse_behavior(raw: &str) -> Vec<String> {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let item =
        ITEM.get_or_init(|| Regex::new(r"^\s*(?:\d{1,3}[.)]|[-*•+])\s+(.*)$").expect("list regex"));
    let items: Vec<String> = raw
        .lines()
        .filter_map(|l| item.captures(l).map(|c| strip_markdown(&c[1])))
        .filter(|s| !s.is_empty())
        .collect();
    if !items.is_empty() {
        return items;
    }
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = raw.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let at_end = matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace());
        if at_end || c == '\n' {
            let s = strip_markdown(&current);
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = strip_markdown(&current);
    if !s.is_empty() {
        out.push(s);
    }
    out
}
