//! Runs annotators over a corpus and persists their records.
//!
//! Records live in append-only NDJSON logs at
//! `records/<annotator>/<task>.ndjson`. A record is reused on re-run when a
//! successful one exists for the same post and prompt version, so a crashed
//! or interrupted run resumes where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{self, Distribution};
use crate::corpus::Post;
use crate::gateway::{fnv1a, CompletionResult, Gateway, GatewayError, PromptItem};
use crate::labels::{DisorderLabel, LabelSet};
use crate::lexicon::{annotate_dictionary, DictionaryMatcher, Lexicon};
use crate::tasks::{
    parse_behavior, parse_binary, BinaryVerdict, SeverityLevel, TaskKind, TemplatePack,
    TherapyRecommendation,
};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("the dictionary annotator only supports the disorder task, not {0}")]
    UnsupportedTask(TaskKind),
    #[error("record for post `{0}` has no matching post in the corpus")]
    MissingPost(String),
    #[error("invalid annotator name `{0}`")]
    InvalidName(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    Dictionary,
    Llm,
}

/// `dictionary` for the lexicon matcher, otherwise an LLM backend name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotatorId {
    pub kind: AnnotatorKind,
    pub name: String,
}

pub const DICTIONARY: &str = "dictionary";

impl AnnotatorId {
    pub fn dictionary() -> Self {
        Self {
            kind: AnnotatorKind::Dictionary,
            name: DICTIONARY.into(),
        }
    }

    pub fn llm(name: &str) -> Self {
        Self {
            kind: AnnotatorKind::Llm,
            name: name.into(),
        }
    }
}

impl fmt::Display for AnnotatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for AnnotatorId {
    type Err = AnnotateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let valid = !s.is_empty()
            && s.chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !s.starts_with('.');
        if !valid {
            return Err(AnnotateError::InvalidName(s.into()));
        }
        Ok(if s == DICTIONARY {
            Self::dictionary()
        } else {
            Self::llm(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub post_id: String,
    pub annotator: AnnotatorId,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<SeverityLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub therapies: Option<Vec<TherapyRecommendation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behaviors: Option<Vec<String>>,
    #[serde(default)]
    pub flagged_self_harm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub truncated: bool,
    pub prompt_version: String,
    #[serde(default)]
    pub failed: bool,
}

impl AnnotationRecord {
    fn empty(post_id: &str, annotator: &AnnotatorId, task: TaskKind, prompt_version: &str) -> Self {
        Self {
            post_id: post_id.into(),
            annotator: annotator.clone(),
            task,
            binary: None,
            labels: None,
            severity: None,
            therapies: None,
            behaviors: None,
            flagged_self_harm: false,
            raw_response: None,
            latency_ms: 0,
            attempts: 0,
            truncated: false,
            prompt_version: prompt_version.into(),
            failed: false,
        }
    }

    /// Builds an LLM record by parsing a completion for `task`. Failed calls
    /// keep the raw text and leave parsed fields empty, except the binary
    /// verdict which becomes `Other`.
    pub fn from_completion(
        post_id: &str,
        annotator: &AnnotatorId,
        task: TaskKind,
        pack: &TemplatePack,
        result: &CompletionResult,
        truncated: bool,
    ) -> Self {
        let mut r = Self::empty(post_id, annotator, task, pack.version());
        r.raw_response = Some(result.text.clone());
        r.latency_ms = result.latency_ms;
        r.attempts = result.attempts;
        r.truncated = truncated;
        r.failed = result.failed;
        if result.failed {
            if task == TaskKind::Binary {
                r.binary = Some(BinaryVerdict::Other);
            }
            return r;
        }
        let raw = result.text.as_str();
        let parsers = pack.parsers();
        match task {
            TaskKind::Binary => r.binary = Some(parse_binary(raw)),
            TaskKind::Disorder => {
                let d = parsers.parse_disorders_detailed(raw);
                r.labels = Some(d.labels);
                r.flagged_self_harm = d.self_harm;
            }
            TaskKind::Severity => r.severity = Some(parsers.parse_severity(raw)),
            TaskKind::RecommendTherapy => r.therapies = Some(parsers.parse_therapies(raw)),
            TaskKind::RecommendBehavior => r.behaviors = Some(parse_behavior(raw)),
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Record store

/// Append-only record logs under one root directory. One writer per run.
#[derive(Debug, Clone)]
pub struct RecordStore {
    root: PathBuf,
}

impl RecordStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, annotator: &str, task: TaskKind) -> PathBuf {
        self.root.join(annotator).join(format!("{task}.ndjson"))
    }

    /// Every record in log order. A torn final line (no trailing newline) is
    /// ignored; any other malformed line is an error.
    pub fn load(
        &self,
        annotator: &str,
        task: TaskKind,
    ) -> Result<Vec<AnnotationRecord>, AnnotateError> {
        let path = self.path(annotator, task);
        let shown = path.display().to_string();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(AnnotateError::Read {
                    path: shown,
                    source,
                })
            }
        };
        let mut reader = BufReader::new(file);
        let mut out = Vec::new();
        let mut line = String::new();
        let mut n = 0;
        loop {
            line.clear();
            let read = reader
                .read_line(&mut line)
                .map_err(|source| AnnotateError::Read {
                    path: shown.clone(),
                    source,
                })?;
            if read == 0 {
                break;
            }
            n += 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<AnnotationRecord>(&line) {
                Ok(r) => out.push(r),
                Err(_) if !line.ends_with('\n') => {
                    log::warn!("{shown}:{n}: ignoring torn final record");
                }
                Err(e) => {
                    return Err(AnnotateError::Malformed {
                        path: shown,
                        line: n,
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// The most recent record per post, optionally restricted to one prompt version.
    pub fn latest(
        &self,
        annotator: &str,
        task: TaskKind,
        prompt_version: Option<&str>,
    ) -> Result<BTreeMap<String, AnnotationRecord>, AnnotateError> {
        let mut out = BTreeMap::new();
        for r in self.load(annotator, task)? {
            if prompt_version.is_none_or(|v| v == r.prompt_version) {
                out.insert(r.post_id.clone(), r);
            }
        }
        Ok(out)
    }

    pub fn append(
        &self,
        annotator: &str,
        task: TaskKind,
        records: &[AnnotationRecord],
    ) -> Result<(), AnnotateError> {
        if records.is_empty() {
            return Ok(());
        }
        let path = self.path(annotator, task);
        let shown = path.display().to_string();
        let wrap = |source| AnnotateError::Write {
            path: shown.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(wrap)?;
        }
        repair_torn_tail(&path).map_err(wrap)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(wrap)?;
        let mut w = BufWriter::new(file);
        for r in records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}").map_err(wrap)?;
        }
        w.flush().map_err(wrap)
    }

    /// Rewrites a log keeping the last record per (post, prompt version),
    /// sorted by post id then version. Returns the number of records kept.
    pub fn compact(&self, annotator: &str, task: TaskKind) -> Result<usize, AnnotateError> {
        let mut latest: BTreeMap<(String, String), AnnotationRecord> = BTreeMap::new();
        for r in self.load(annotator, task)? {
            latest.insert((r.post_id.clone(), r.prompt_version.clone()), r);
        }
        let path = self.path(annotator, task);
        if !path.exists() {
            return Ok(0);
        }
        let shown = path.display().to_string();
        let wrap = |source| AnnotateError::Write {
            path: shown.clone(),
            source,
        };
        let tmp = path.with_extension("ndjson.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(wrap)?);
            for r in latest.values() {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(r).expect("record serializes")
                )
                .map_err(wrap)?;
            }
            w.flush().map_err(wrap)?;
        }
        fs::rename(&tmp, &path).map_err(wrap)?;
        Ok(latest.len())
    }

    /// Annotator directories present in the store, sorted.
    pub fn annotators(&self) -> Result<Vec<String>, AnnotateError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(AnnotateError::Read {
                    path: self.root.display().to_string(),
                    source,
                })
            }
        };
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        Ok(names)
    }
}

/// Drops a final line left without a newline by an interrupted writer.
fn repair_torn_tail(path: &Path) -> io::Result<()> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new()
            .write(true)
            .open(path)?
            .set_len(keep as u64)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Running annotators

pub enum Annotator<'a> {
    Dictionary {
        matcher: &'a DictionaryMatcher,
        version: String,
    },
    Llm(&'a Gateway),
}

impl<'a> Annotator<'a> {
    pub fn dictionary(matcher: &'a DictionaryMatcher, lexicon: &Lexicon) -> Self {
        Annotator::Dictionary {
            matcher,
            version: lexicon_version(lexicon),
        }
    }

    pub fn id(&self) -> AnnotatorId {
        match self {
            Annotator::Dictionary { .. } => AnnotatorId::dictionary(),
            Annotator::Llm(g) => AnnotatorId::llm(g.name()),
        }
    }
}

/// Version tag for dictionary records; changes whenever the lexicon does.
pub fn lexicon_version(lexicon: &Lexicon) -> String {
    format!("lexicon-{:016x}", fnv1a(&[&lexicon.to_json()]))
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub annotator: AnnotatorId,
    pub task: TaskKind,
    /// One record per input post, sorted by post id.
    pub records: Vec<AnnotationRecord>,
    pub backend_calls: usize,
    pub reused: usize,
    pub failures: usize,
}

/// Prompts are sent in chunks of this many lanes' worth so progress reaches
/// the store before the whole batch is done.
const CHUNK_PER_LANE: usize = 32;

pub fn run_annotator(
    posts: &[Post],
    annotator: &Annotator<'_>,
    tasks: &[TaskKind],
    pack: &TemplatePack,
    store: &RecordStore,
) -> Result<Vec<TaskOutcome>, AnnotateError> {
    let mut outcomes = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let outcome = match annotator {
            Annotator::Dictionary { matcher, version } => {
                if task != TaskKind::Disorder {
                    return Err(AnnotateError::UnsupportedTask(task));
                }
                run_dictionary(posts, matcher, version, store)?
            }
            Annotator::Llm(gateway) => run_llm(posts, gateway, task, pack, store)?,
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn sorted_posts(posts: &[Post]) -> Vec<&Post> {
    let mut v: Vec<&Post> = posts.iter().collect();
    v.sort_by(|a, b| a.id().cmp(b.id()));
    v.dedup_by(|a, b| a.id() == b.id());
    v
}

fn run_dictionary(
    posts: &[Post],
    matcher: &DictionaryMatcher,
    version: &str,
    store: &RecordStore,
) -> Result<TaskOutcome, AnnotateError> {
    let id = AnnotatorId::dictionary();
    let task = TaskKind::Disorder;
    let existing = store.latest(&id.name, task, Some(version))?;
    let mut fresh = Vec::new();
    let mut records = Vec::new();
    for post in sorted_posts(posts) {
        if let Some(r) = existing.get(post.id()) {
            records.push(r.clone());
            continue;
        }
        let mut r = AnnotationRecord::empty(post.id(), &id, task, version);
        r.labels = Some(annotate_dictionary(post, matcher).labels);
        fresh.push(r.clone());
        records.push(r);
    }
    store.append(&id.name, task, &fresh)?;
    Ok(TaskOutcome {
        annotator: id,
        task,
        reused: records.len() - fresh.len(),
        records,
        backend_calls: 0,
        failures: 0,
    })
}

fn run_llm(
    posts: &[Post],
    gateway: &Gateway,
    task: TaskKind,
    pack: &TemplatePack,
    store: &RecordStore,
) -> Result<TaskOutcome, AnnotateError> {
    let id = AnnotatorId::llm(gateway.name());
    let existing = store.latest(&id.name, task, Some(pack.version()))?;
    let template = pack.template(task);
    let posts = sorted_posts(posts);
    let pending: Vec<&Post> = posts
        .iter()
        .copied()
        .filter(|p| existing.get(p.id()).is_none_or(|r| r.failed))
        .collect();

    let mut fresh: HashMap<String, AnnotationRecord> = HashMap::with_capacity(pending.len());
    let mut backend_calls = 0;
    let chunk = gateway.config().max_in_flight.max(1) * CHUNK_PER_LANE;
    for batch in pending.chunks(chunk) {
        let mut truncated = HashMap::with_capacity(batch.len());
        let items: Vec<PromptItem> = batch
            .iter()
            .map(|p| {
                let rendered = template.render(p);
                truncated.insert(p.id(), rendered.truncated);
                PromptItem {
                    id: p.id().to_string(),
                    tag: Some(task.as_str().to_string()),
                    system: rendered.system,
                    user: rendered.user,
                }
            })
            .collect();
        let results = gateway.complete_batch(&items)?;
        let mut batch_records = Vec::with_capacity(results.len());
        for (post_id, result) in &results {
            backend_calls += result.attempts as usize;
            let r = AnnotationRecord::from_completion(
                post_id,
                &id,
                task,
                pack,
                result,
                truncated[post_id.as_str()],
            );
            batch_records.push(r);
        }
        store.append(&id.name, task, &batch_records)?;
        fresh.extend(batch_records.into_iter().map(|r| (r.post_id.clone(), r)));
    }

    let mut records = Vec::with_capacity(posts.len());
    for post in &posts {
        match fresh.remove(post.id()) {
            Some(r) => records.push(r),
            None => records.push(existing[post.id()].clone()),
        }
    }
    let failures = records.iter().filter(|r| r.failed).count();
    Ok(TaskOutcome {
        annotator: id,
        task,
        reused: posts.len() - pending.len(),
        records,
        backend_calls,
        failures,
    })
}

#[derive(Debug, Clone)]
pub struct BinaryFilter {
    pub verdicts: BTreeMap<String, BinaryVerdict>,
    pub distribution: Distribution,
    pub outcome: TaskOutcome,
}

impl BinaryFilter {
    /// Posts judged relevant, in input order.
    pub fn admitted<'p>(&self, posts: &'p [Post]) -> Vec<&'p Post> {
        posts
            .iter()
            .filter(|p| self.verdicts.get(p.id()) == Some(&BinaryVerdict::Yes))
            .collect()
    }
}

/// Asks the backend whether each post concerns mental health.
pub fn run_binary_filter(
    posts: &[Post],
    gateway: &Gateway,
    pack: &TemplatePack,
    store: &RecordStore,
) -> Result<BinaryFilter, AnnotateError> {
    let outcome = run_llm(posts, gateway, TaskKind::Binary, pack, store)?;
    let verdicts: BTreeMap<String, BinaryVerdict> = outcome
        .records
        .iter()
        .map(|r| (r.post_id.clone(), r.binary.unwrap_or(BinaryVerdict::Other)))
        .collect();
    let mut counts = [0u64; 3];
    for v in verdicts.values() {
        counts[*v as usize] += 1;
    }
    let distribution = analyze::binary_distribution(&counts);
    Ok(BinaryFilter {
        verdicts,
        distribution,
        outcome,
    })
}

// ---------------------------------------------------------------------------
// Training export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub post_id: String,
    pub text: String,
    pub labels: LabelSet,
}

impl TrainingExample {
    /// Indicators in the fixed disorder order.
    pub fn label_vector(&self) -> [u8; 9] {
        self.labels.vector()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportStats {
    pub total_records: usize,
    pub none_excluded: usize,
    /// Records without a label set (failed calls).
    pub unlabeled_skipped: usize,
    pub exported: usize,
    pub per_label: BTreeMap<String, usize>,
}

/// Training examples from one annotator's disorder records. `{None}` posts
/// are excluded and counted.
pub fn export_training_set(
    records: &[AnnotationRecord],
    posts: &[Post],
) -> Result<(Vec<TrainingExample>, ExportStats), AnnotateError> {
    let by_id: HashMap<&str, &Post> = posts.iter().map(|p| (p.id(), p)).collect();
    let mut stats = ExportStats {
        total_records: records.len(),
        per_label: DisorderLabel::DISORDERS
            .iter()
            .map(|d| (d.key().to_string(), 0))
            .collect(),
        ..ExportStats::default()
    };
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.post_id.cmp(&b.post_id));
    let mut out = Vec::new();
    for r in sorted {
        let post = by_id
            .get(r.post_id.as_str())
            .ok_or_else(|| AnnotateError::MissingPost(r.post_id.clone()))?;
        let Some(labels) = r.labels else {
            stats.unlabeled_skipped += 1;
            continue;
        };
        if labels.is_none() {
            stats.none_excluded += 1;
            continue;
        }
        for d in labels.disorders() {
            *stats.per_label.get_mut(d.key()).expect("all keys present") += 1;
        }
        out.push(TrainingExample {
            post_id: r.post_id.clone(),
            text: post.text().to_string(),
            labels,
        });
    }
    stats.exported = out.len();
    Ok((out, stats))
}

pub const TRAINING_FILE: &str = "training.ndjson";
pub const EXPORT_STATS_FILE: &str = "export_stats.json";

pub fn write_export(
    dir: &Path,
    examples: &[TrainingExample],
    stats: &ExportStats,
) -> Result<(), AnnotateError> {
    let wrap = |path: &Path| {
        let shown = path.display().to_string();
        move |source| AnnotateError::Write {
            path: shown,
            source,
        }
    };
    fs::create_dir_all(dir).map_err(wrap(dir))?;
    let path = dir.join(TRAINING_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(wrap(&path))?);
    for e in examples {
        writeln!(
            w,
            "{}",
            serde_json::to_string(e).expect("example serializes")
        )
        .map_err(wrap(&path))?;
    }
    w.flush().map_err(wrap(&path))?;
    let path = dir.join(EXPORT_STATS_FILE);
    let body = serde_json::to_string_pretty(stats).expect("stats serialize") + "\n";
    fs::write(&path, body).map_err(wrap(&path))
}

pub fn read_training(path: &Path) -> Result<Vec<TrainingExample>, AnnotateError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| AnnotateError::Read {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnnotateError::Read {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| AnnotateError::Malformed {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, MockRule, MockSpec};
    use DisorderLabel as D;

    fn post(id: &str, text: &str) -> Post {
        Post::new(id, "mentalhealth", 0, "", text).unwrap()
    }

    fn record(id: &str, labels: Option<LabelSet>) -> AnnotationRecord {
        let mut r = AnnotationRecord::empty(id, &AnnotatorId::llm("m"), TaskKind::Disorder, "v1");
        r.labels = labels;
        r
    }

    #[test]
    fn annotator_names() {
        assert_eq!(
            "dictionary".parse::<AnnotatorId>().unwrap().kind,
            AnnotatorKind::Dictionary
        );
        assert_eq!(
            "llama3".parse::<AnnotatorId>().unwrap(),
            AnnotatorId::llm("llama3")
        );
        assert!("../x".parse::<AnnotatorId>().is_err());
        assert!("".parse::<AnnotatorId>().is_err());
    }

    #[test]
    fn dictionary_records_carry_labels_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        let mut lex = Lexicon::default();
        lex.insert(D::Anxiety, "anxious").unwrap();
        let matcher = lex.matcher();
        let posts = [
            post("c", "so anxious"),
            post("a", "nice day"),
            post("b", "anxious again"),
        ];
        let ann = Annotator::dictionary(&matcher, &lex);
        let out = run_annotator(
            &posts,
            &ann,
            &[TaskKind::Disorder],
            &TemplatePack::builtin(),
            &store,
        )
        .unwrap();
        let recs = &out[0].records;
        assert_eq!(
            recs.iter().map(|r| r.post_id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert!(recs[0].labels.unwrap().is_none());
        assert_eq!(recs[1].labels.unwrap().labels(), vec![D::Anxiety]);
        assert!(recs
            .iter()
            .all(|r| r.binary.is_none() && r.severity.is_none() && r.therapies.is_none()));
        assert!(matches!(
            run_annotator(
                &posts,
                &ann,
                &[TaskKind::Severity],
                &TemplatePack::builtin(),
                &store
            ),
            Err(AnnotateError::UnsupportedTask(TaskKind::Severity))
        ));
        let again = run_annotator(
            &posts,
            &ann,
            &[TaskKind::Disorder],
            &TemplatePack::builtin(),
            &store,
        )
        .unwrap();
        assert_eq!(again[0].reused, 3);
        assert_eq!(store.load(DICTIONARY, TaskKind::Disorder).unwrap().len(), 3);
    }

    #[test]
    fn llm_rerun_makes_no_new_calls() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        let spec = MockSpec {
            rules: vec![MockRule {
                task: Some("disorder".into()),
                pattern: "panic".into(),
                response: "Anxiety".into(),
            }],
            default_response: "None".into(),
            ..MockSpec::default()
        };
        let gw = Gateway::from_config(&BackendConfig::mock("m", spec)).unwrap();
        let posts = [post("p1", "panic attacks"), post("p2", "just a cat")];
        let pack = TemplatePack::builtin();
        let first = run_annotator(
            &posts,
            &Annotator::Llm(&gw),
            &[TaskKind::Disorder],
            &pack,
            &store,
        )
        .unwrap();
        assert_eq!(first[0].backend_calls, 2);
        assert_eq!(
            first[0].records[0].labels.unwrap().labels(),
            vec![D::Anxiety]
        );
        assert!(first[0].records[1].labels.unwrap().is_none());
        let calls = gw.backend_stats().unwrap().calls;
        let second = run_annotator(
            &posts,
            &Annotator::Llm(&gw),
            &[TaskKind::Disorder],
            &pack,
            &store,
        )
        .unwrap();
        assert_eq!(gw.backend_stats().unwrap().calls, calls);
        assert_eq!(second[0].reused, 2);
        assert_eq!(second[0].records, first[0].records);
    }

    #[test]
    fn failed_calls_keep_raw_and_are_retried_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        let spec = MockSpec {
            fail_first_attempts: 1,
            default_response: "Severe".into(),
            ..MockSpec::default()
        };
        let mut cfg = BackendConfig::mock("m", spec);
        cfg.max_retries = 0;
        let gw = Gateway::from_config(&cfg).unwrap();
        let pack = TemplatePack::builtin();
        let posts = [post("p", "text")];
        let first = run_annotator(
            &posts,
            &Annotator::Llm(&gw),
            &[TaskKind::Severity],
            &pack,
            &store,
        )
        .unwrap();
        let r = &first[0].records[0];
        assert!(r.failed && r.severity.is_none() && r.raw_response.is_some());
        let second = run_annotator(
            &posts,
            &Annotator::Llm(&gw),
            &[TaskKind::Severity],
            &pack,
            &store,
        )
        .unwrap();
        assert_eq!(second[0].records[0].severity, Some(SeverityLevel::Severe));
        assert_eq!(store.compact("m", TaskKind::Severity).unwrap(), 1);
        assert_eq!(
            store.latest("m", TaskKind::Severity, None).unwrap()["p"].severity,
            Some(SeverityLevel::Severe)
        );
    }

    #[test]
    fn binary_filter_gates_on_yes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MockSpec {
            rules: vec![MockRule {
                task: None,
                pattern: "sad".into(),
                response: "Yes.".into(),
            }],
            default_response: "No".into(),
            ..MockSpec::default()
        };
        let gw = Gateway::from_config(&BackendConfig::mock("g", spec)).unwrap();
        let posts = [
            post("1", "so sad"),
            post("2", "new bike"),
            post("3", "sad again"),
        ];
        let f = run_binary_filter(
            &posts,
            &gw,
            &TemplatePack::builtin(),
            &RecordStore::new(dir.path()),
        )
        .unwrap();
        assert_eq!(f.admitted(&posts).len(), 2);
        assert_eq!(f.distribution.total, 3);
    }

    #[test]
    fn empty_corpus_filter() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::from_config(&BackendConfig::mock("g", MockSpec::echo("yes"))).unwrap();
        let f = run_binary_filter(
            &[],
            &gw,
            &TemplatePack::builtin(),
            &RecordStore::new(dir.path()),
        )
        .unwrap();
        assert!(f.verdicts.is_empty());
        assert_eq!(f.distribution.total, 0);
        assert!(f
            .distribution
            .categories
            .iter()
            .all(|c| c.count == 0 && c.percent == 0.0));
    }

    #[test]
    fn export_encodes_and_excludes_none() {
        let posts = [post("a", "x"), post("b", "y"), post("c", "z")];
        let dep: LabelSet = [D::Depression].into_iter().collect();
        let recs = [
            record("a", Some(dep)),
            record("b", Some(LabelSet::none())),
            record("c", None),
        ];
        let (ex, stats) = export_training_set(&recs, &posts).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].label_vector(), [0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(stats.none_excluded, 1);
        assert_eq!(stats.unlabeled_skipped, 1);
        assert_eq!(stats.per_label["depression"], 1);
        assert!(matches!(
            export_training_set(&[record("zz", Some(dep))], &posts),
            Err(AnnotateError::MissingPost(id)) if id == "zz"
        ));
    }

    #[test]
    fn torn_tail_is_tolerated_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        store
            .append(
                "m",
                TaskKind::Disorder,
                &[record("a", Some(LabelSet::none()))],
            )
            .unwrap();
        let path = store.path("m", TaskKind::Disorder);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"post_id\":\"b\",").unwrap();
        assert_eq!(store.load("m", TaskKind::Disorder).unwrap().len(), 1);
        store
            .append(
                "m",
                TaskKind::Disorder,
                &[record("c", Some(LabelSet::none()))],
            )
            .unwrap();
        let ids: Vec<String> = store
            .load("m", TaskKind::Disorder)
            .unwrap()
            .into_iter()
            .map(|r| r.post_id)
            .collect();
        assert_eq!(ids, ["a", "c"]);
    }
}
