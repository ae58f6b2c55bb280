//! End-to-end run: ingest, sample, relevance filter, annotate, export,
//! evaluate and analyze, driven by one TOML run configuration.
//!
//! A stage is skipped when its outputs exist and no earlier stage ran in the
//! same invocation. LLM stages resume through the record store. The manifest
//! is rewritten after every stage so a failed run leaves a partial one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analyze::{self, LabelOptions, Normalization, REPORT_FILES};
use crate::annotate::{
    self, export_training_set, run_annotator, run_binary_filter, write_export, Annotator,
    AnnotatorId, AnnotatorKind, RecordStore, EXPORT_STATS_FILE, TRAINING_FILE,
};
use crate::corpus::{self, CorpusFilter, Post, SampleSpec};
use crate::evaluate::{self, make_folds, FOLDS_FILE};
use crate::gateway::{parse_doc, BackendConfig, BackendsFile, Gateway};
use crate::lexicon::Lexicon;
use crate::tasks::{TaskKind, TemplatePack};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Parses an ISO 8601 date or date-time to epoch seconds (UTC). A bare date
/// means the start of that day, or its last second when `end_of_day` is set.
pub fn parse_timestamp(raw: &str, end_of_day: bool) -> Result<i64, String> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        let t = if end_of_day {
            d.and_hms_opt(23, 59, 59)
        } else {
            d.and_hms_opt(0, 0, 0)
        };
        return Ok(t.expect("valid time").and_utc().timestamp());
    }
    Err(format!("`{raw}` is not an ISO 8601 date or date-time"))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub dumps: Vec<PathBuf>,
    #[serde(default)]
    pub communities: Option<Vec<String>>,
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub to: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub size: usize,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_version() -> String {
    "v1".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSection {
    pub annotators: Vec<String>,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub gate_backend: Option<String>,
    #[serde(default = "default_true")]
    pub gate: bool,
    #[serde(default = "default_version")]
    pub prompt_version: String,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldsSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FoldsSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    #[serde(default)]
    pub none_as_label: bool,
    #[serde(default)]
    pub norm: Normalization,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub sample: SampleSection,
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub folds: FoldsSection,
    pub output: OutputSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
}

/// A configuration that passed validation, with resolved values.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub raw: RunConfig,
    pub filter: CorpusFilter,
    pub sample: SampleSpec,
    pub annotators: Vec<AnnotatorId>,
    pub tasks: Vec<TaskKind>,
    pub backends: BackendsFile,
}

impl RunConfig {
    /// Loads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.dumps.iter_mut().for_each(fix);
        self.annotation.prompts_dir.as_mut().map(fix);
        self.annotation.lexicon.as_mut().map(fix);
        fix(&mut self.output.dir);
        self.evaluate.predictions.as_mut().map(fix);
        let mut file = BackendsFile {
            backends: std::mem::take(&mut self.backends),
        };
        file.resolve_paths(base);
        self.backends = file.backends;
    }

    pub fn validate(&self) -> Result<ValidatedConfig, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if self.corpus.dumps.is_empty() {
            return Err(invalid("corpus.dumps is empty".into()));
        }
        let start = match &self.corpus.from {
            Some(s) => parse_timestamp(s, false).map_err(invalid)?,
            None => i64::MIN,
        };
        let end = match &self.corpus.to {
            Some(s) => parse_timestamp(s, true).map_err(invalid)?,
            None => i64::MAX,
        };
        let filter = CorpusFilter::new(self.corpus.communities.as_ref(), start, end)
            .map_err(|e| invalid(e.to_string()))?;
        let sample = SampleSpec::new(self.sample.size, self.sample.seed)
            .map_err(|e| invalid(e.to_string()))?;
        if self.folds.k < 2 {
            return Err(invalid(format!(
                "folds.k must be at least 2, got {}",
                self.folds.k
            )));
        }
        let backends = BackendsFile {
            backends: self.backends.clone(),
        };
        backends.validate().map_err(|e| invalid(e.to_string()))?;

        let mut seen = BTreeSet::new();
        let mut annotators = Vec::new();
        for name in &self.annotation.annotators {
            let id: AnnotatorId = name
                .parse()
                .map_err(|e: annotate::AnnotateError| invalid(e.to_string()))?;
            if !seen.insert(id.name.clone()) {
                return Err(invalid(format!("annotator `{}` is listed twice", id.name)));
            }
            if id.kind == AnnotatorKind::Llm && backends.get(&id.name).is_err() {
                return Err(invalid(format!(
                    "unknown annotator `{}`: no backend with that name",
                    id.name
                )));
            }
            if id.kind == AnnotatorKind::Dictionary && self.annotation.lexicon.is_none() {
                return Err(invalid(
                    "the dictionary annotator needs annotation.lexicon".into(),
                ));
            }
            annotators.push(id);
        }
        if annotators.is_empty() {
            return Err(invalid("annotation.annotators is empty".into()));
        }
        let mut tasks = Vec::new();
        for t in &self.annotation.tasks {
            let task: TaskKind = t
                .parse()
                .map_err(|e: crate::tasks::TaskError| invalid(e.to_string()))?;
            if task == TaskKind::Binary {
                return Err(invalid(
                    "the binary task runs as the filter stage, not in annotation.tasks".into(),
                ));
            }
            if !tasks.contains(&task) {
                tasks.push(task);
            }
        }
        if self.annotation.gate && self.annotation.gate_backend.is_none() {
            return Err(invalid(
                "annotation.gate is on but annotation.gate_backend is not set".into(),
            ));
        }
        if let Some(g) = &self.annotation.gate_backend {
            if backends.get(g).is_err() {
                return Err(invalid(format!("unknown gate backend `{g}`")));
            }
        }
        Ok(ValidatedConfig {
            raw: self.clone(),
            filter,
            sample,
            annotators,
            tasks,
            backends,
        })
    }
}

/// Parses a config document from a string (TOML); used by tests and tools.
pub fn parse_config(path: &str, raw: &str) -> Result<RunConfig, ConfigError> {
    parse_doc::<RunConfig>(Path::new(path), raw).map_err(|e| ConfigError::Invalid(e.to_string()))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub duration_ms: u64,
    #[serde(default)]
    pub counts: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub prompt_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Value,
    pub stages: Vec<StageRecord>,
    /// `ok`, `partial` (some LLM calls failed) or `failed`.
    pub status: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGES: [&str; 7] = [
    "ingest", "sample", "filter", "annotate", "export", "evaluate", "analyze",
];

/// Where each stage writes, relative to the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.ndjson")
    }
    pub fn sample(&self) -> PathBuf {
        self.root.join("sample.ndjson")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }
    pub fn exports(&self) -> PathBuf {
        self.root.join("exports")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    /// 0 success, 2 stage failure, 3 finished with failed LLM calls.
    pub exit_code: i32,
}

struct Runner<'a> {
    cfg: &'a ValidatedConfig,
    layout: Layout,
    manifest: Manifest,
    previous: BTreeMap<String, StageRecord>,
    /// Set once any stage has run; later stages then recompute.
    dirty: bool,
    llm_failures: u64,
}

impl Runner<'_> {
    fn write_manifest(&self) -> Result<(), String> {
        let path = self.layout.manifest();
        let body =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))
    }

    fn record(
        &mut self,
        name: &str,
        status: StageStatus,
        started: Instant,
        counts: BTreeMap<String, Value>,
        note: Option<String>,
    ) {
        let counts = if status == StageStatus::Skipped && counts.is_empty() {
            self.previous
                .get(name)
                .map(|s| s.counts.clone())
                .unwrap_or_default()
        } else {
            counts
        };
        if status == StageStatus::Ran {
            self.dirty = true;
        }
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status,
            duration_ms: started.elapsed().as_millis() as u64,
            counts,
            note,
        });
    }

    fn fresh(&self, outputs: &[PathBuf]) -> bool {
        !self.dirty && outputs.iter().all(|p| p.exists())
    }
}

fn counts(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Runs every stage in order. Validation has already happened; errors
/// here are runtime failures and leave a manifest with a failed stage.
pub fn run_pipeline(cfg: &ValidatedConfig) -> RunOutcome {
    let layout = Layout {
        root: cfg.raw.output.dir.clone(),
    };
    let previous: BTreeMap<String, StageRecord> = fs::read_to_string(layout.manifest())
        .ok()
        .and_then(|raw| serde_json::from_str::<Manifest>(&raw).ok())
        .map(|m| m.stages.into_iter().map(|s| (s.name.clone(), s)).collect())
        .unwrap_or_default();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        prompt_version: cfg.raw.annotation.prompt_version.clone(),
        seeds: BTreeMap::from([
            ("sample".into(), cfg.sample.seed()),
            ("folds".into(), cfg.raw.folds.seed),
        ]),
        inputs: json!({
            "dumps": cfg.raw.corpus.dumps,
            "communities": cfg.raw.corpus.communities,
            "window": cfg.filter.window(),
            "sample_size": cfg.sample.size(),
            "annotators": cfg.annotators.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
            "tasks": cfg.tasks.iter().map(|t| t.as_str()).collect::<Vec<_>>(),
            "gate": cfg.raw.annotation.gate,
            "gate_backend": cfg.raw.annotation.gate_backend,
            "folds_k": cfg.raw.folds.k,
            "backends": cfg.backends.backends.iter().map(|b| json!({
                "name": b.name, "kind": b.kind, "model_id": b.model(), "temperature": b.temperature,
            })).collect::<Vec<_>>(),
        }),
        stages: Vec::new(),
        status: "running".into(),
    };
    let mut runner = Runner {
        cfg,
        layout,
        manifest,
        previous,
        dirty: false,
        llm_failures: 0,
    };
    let result = fs::create_dir_all(&runner.layout.root)
        .map_err(|e| {
            (
                "ingest",
                format!("cannot create {}: {e}", runner.layout.root.display()),
            )
        })
        .and_then(|()| stages(&mut runner));
    let exit_code = match result {
        Ok(()) if runner.llm_failures > 0 => {
            runner.manifest.status = "partial".into();
            3
        }
        Ok(()) => {
            runner.manifest.status = "ok".into();
            0
        }
        Err((stage, message)) => {
            log::error!("stage {stage} failed: {message}");
            runner.manifest.stages.push(StageRecord {
                name: stage.into(),
                status: StageStatus::Failed,
                duration_ms: 0,
                counts: BTreeMap::new(),
                note: Some(message),
            });
            runner.manifest.status = "failed".into();
            2
        }
    };
    if let Err(e) = runner.write_manifest() {
        log::error!("{e}");
    }
    RunOutcome {
        manifest: runner.manifest,
        exit_code,
    }
}

type StageResult<T> = Result<T, (&'static str, String)>;

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> (&'static str, String) {
    move |e| (stage, e.to_string())
}

fn stages(r: &mut Runner<'_>) -> StageResult<()> {
    let cfg = r.cfg;

    // ingest
    let t = Instant::now();
    let corpus_path = r.layout.corpus();
    if r.fresh(std::slice::from_ref(&corpus_path)) {
        r.record(
            "ingest",
            StageStatus::Skipped,
            t,
            BTreeMap::new(),
            Some("output present".into()),
        );
    } else {
        let (posts, stats) =
            corpus::ingest_files(&cfg.raw.corpus.dumps, &cfg.filter).map_err(fail("ingest"))?;
        corpus::write_corpus(&corpus_path, &posts).map_err(fail("ingest"))?;
        let c = serde_json::to_value(stats).expect("stats serialize");
        let c = c.as_object().expect("object").clone().into_iter().collect();
        r.record("ingest", StageStatus::Ran, t, c, None);
    }
    r.write_manifest().map_err(fail("ingest"))?;

    // sample
    let t = Instant::now();
    let sample_path = r.layout.sample();
    let posts = if r.fresh(std::slice::from_ref(&sample_path)) {
        let posts = corpus::read_corpus(&sample_path).map_err(fail("sample"))?;
        r.record(
            "sample",
            StageStatus::Skipped,
            t,
            counts(&[("sampled", json!(posts.len()))]),
            Some("output present".into()),
        );
        posts
    } else {
        let all = corpus::read_corpus(&corpus_path).map_err(fail("sample"))?;
        let posts = corpus::sample(&all, cfg.sample);
        corpus::write_corpus(&sample_path, &posts).map_err(fail("sample"))?;
        r.record(
            "sample",
            StageStatus::Ran,
            t,
            counts(&[
                ("available", json!(all.len())),
                ("sampled", json!(posts.len())),
                ("seed", json!(cfg.sample.seed())),
            ]),
            None,
        );
        posts
    };
    r.write_manifest().map_err(fail("sample"))?;

    // filter
    let t = Instant::now();
    let pack = TemplatePack::resolve(
        &cfg.raw.annotation.prompt_version,
        cfg.raw.annotation.prompts_dir.as_deref(),
    )
    .map_err(fail("filter"))?;
    let store = RecordStore::new(r.layout.records());
    let mut gateways: BTreeMap<String, Gateway> = BTreeMap::new();
    for b in &cfg.backends.backends {
        gateways.insert(
            b.name.clone(),
            Gateway::from_config(b).map_err(fail("filter"))?,
        );
    }
    let gated: Vec<Post> = match &cfg.raw.annotation.gate_backend {
        Some(name) => {
            let f = run_binary_filter(&posts, &gateways[name], &pack, &store)
                .map_err(fail("filter"))?;
            let admitted: Vec<Post> = if cfg.raw.annotation.gate {
                f.admitted(&posts).into_iter().cloned().collect()
            } else {
                posts.clone()
            };
            let status = if f.outcome.reused == f.outcome.records.len() {
                StageStatus::Skipped
            } else {
                StageStatus::Ran
            };
            r.llm_failures += f.outcome.failures as u64;
            let shares: BTreeMap<String, Value> = f
                .distribution
                .categories
                .iter()
                .map(|c| (c.category.clone(), json!(c.count)))
                .collect();
            r.record(
                "filter",
                status,
                t,
                counts(&[
                    ("backend", json!(name)),
                    ("verdicts", json!(shares)),
                    ("admitted", json!(admitted.len())),
                    ("gate", json!(cfg.raw.annotation.gate)),
                    ("backend_calls", json!(f.outcome.backend_calls)),
                    ("failures", json!(f.outcome.failures)),
                ]),
                None,
            );
            admitted
        }
        None => {
            r.record(
                "filter",
                StageStatus::Skipped,
                t,
                counts(&[("admitted", json!(posts.len()))]),
                Some("no gate backend".into()),
            );
            posts.clone()
        }
    };
    r.write_manifest().map_err(fail("filter"))?;

    // annotate
    let t = Instant::now();
    let lexicon = match &cfg.raw.annotation.lexicon {
        Some(p)
            if cfg
                .annotators
                .iter()
                .any(|a| a.kind == AnnotatorKind::Dictionary) =>
        {
            Some(Lexicon::load(p).map_err(fail("annotate"))?)
        }
        _ => None,
    };
    let matcher = lexicon.as_ref().map(Lexicon::matcher);
    let mut any_new = false;
    let mut per_annotator = BTreeMap::new();
    let mut disorder_records = BTreeMap::new();
    for id in &cfg.annotators {
        let (annotator, tasks) = match id.kind {
            AnnotatorKind::Dictionary => (
                Annotator::dictionary(
                    matcher.as_ref().expect("lexicon loaded"),
                    lexicon.as_ref().expect("lexicon loaded"),
                ),
                cfg.tasks
                    .iter()
                    .copied()
                    .filter(|t| *t == TaskKind::Disorder)
                    .collect::<Vec<_>>(),
            ),
            AnnotatorKind::Llm => (Annotator::Llm(&gateways[&id.name]), cfg.tasks.clone()),
        };
        let outcomes =
            run_annotator(&gated, &annotator, &tasks, &pack, &store).map_err(fail("annotate"))?;
        let mut summary = BTreeMap::new();
        for o in outcomes {
            any_new |= o.reused < o.records.len();
            r.llm_failures += o.failures as u64;
            summary.insert(
                o.task.as_str().to_string(),
                json!({"records": o.records.len(), "reused": o.reused, "backend_calls": o.backend_calls, "failures": o.failures}),
            );
            store.compact(&id.name, o.task).map_err(fail("annotate"))?;
            if o.task == TaskKind::Disorder {
                disorder_records.insert(id.name.clone(), o.records);
            }
        }
        per_annotator.insert(id.name.clone(), json!(summary));
    }
    let status = if any_new {
        StageStatus::Ran
    } else {
        StageStatus::Skipped
    };
    r.record(
        "annotate",
        status,
        t,
        counts(&[
            ("posts", json!(gated.len())),
            ("annotators", json!(per_annotator)),
        ]),
        None,
    );
    r.write_manifest().map_err(fail("annotate"))?;

    // export
    let t = Instant::now();
    let exports = r.layout.exports();
    let outputs: Vec<PathBuf> = disorder_records
        .keys()
        .flat_map(|a| {
            [TRAINING_FILE, EXPORT_STATS_FILE, FOLDS_FILE].map(|f| exports.join(a).join(f))
        })
        .collect();
    if r.fresh(&outputs) {
        r.record(
            "export",
            StageStatus::Skipped,
            t,
            BTreeMap::new(),
            Some("output present".into()),
        );
    } else {
        let mut summary = BTreeMap::new();
        let mut notes = Vec::new();
        for (annotator, records) in &disorder_records {
            let (examples, stats) = export_training_set(records, &gated).map_err(fail("export"))?;
            let dir = exports.join(annotator);
            write_export(&dir, &examples, &stats).map_err(fail("export"))?;
            let ids: Vec<&str> = examples.iter().map(|e| e.post_id.as_str()).collect();
            match make_folds(&ids, cfg.raw.folds.k, cfg.raw.folds.seed) {
                Ok(f) => f.write(&dir.join(FOLDS_FILE)).map_err(fail("export"))?,
                Err(e) => {
                    let _ = fs::remove_file(dir.join(FOLDS_FILE));
                    notes.push(format!("{annotator}: no folds ({e})"));
                }
            }
            summary.insert(
                annotator.clone(),
                serde_json::to_value(&stats).expect("stats serialize"),
            );
        }
        let note = (!notes.is_empty()).then(|| notes.join("; "));
        r.record(
            "export",
            StageStatus::Ran,
            t,
            counts(&[("annotators", json!(summary))]),
            note,
        );
    }
    r.write_manifest().map_err(fail("export"))?;

    // evaluate
    let t = Instant::now();
    let eval_dir = r.layout.evaluation();
    match &cfg.raw.evaluate.predictions {
        None => r.record(
            "evaluate",
            StageStatus::Skipped,
            t,
            BTreeMap::new(),
            Some("no predictions configured".into()),
        ),
        Some(_)
            if r.fresh(&[
                eval_dir.join("comparison.csv"),
                eval_dir.join("comparison.json"),
            ]) =>
        {
            r.record(
                "evaluate",
                StageStatus::Skipped,
                t,
                BTreeMap::new(),
                Some("output present".into()),
            )
        }
        Some(pred) => {
            let table = evaluate::build_comparison(pred, &exports).map_err(fail("evaluate"))?;
            table.write(&eval_dir).map_err(fail("evaluate"))?;
            r.record(
                "evaluate",
                StageStatus::Ran,
                t,
                counts(&[("rows", json!(table.rows.len()))]),
                None,
            );
        }
    }
    r.write_manifest().map_err(fail("evaluate"))?;

    // analyze
    let t = Instant::now();
    let reports = r.layout.reports();
    let outputs: Vec<PathBuf> = REPORT_FILES
        .iter()
        .flat_map(|b| [format!("{b}.csv"), format!("{b}.json")])
        .map(|f| reports.join(f))
        .collect();
    if r.fresh(&outputs) {
        r.record(
            "analyze",
            StageStatus::Skipped,
            t,
            BTreeMap::new(),
            Some("output present".into()),
        );
    } else {
        let options = LabelOptions {
            norm: cfg.raw.analyze.norm,
            none_as_label: cfg.raw.analyze.none_as_label,
        };
        let bundle = analyze::build_reports(&store, options).map_err(fail("analyze"))?;
        let written = analyze::emit_reports(&bundle, &reports).map_err(fail("analyze"))?;
        r.record(
            "analyze",
            StageStatus::Ran,
            t,
            counts(&[("files", json!(written.len()))]),
            None,
        );
    }
    r.write_manifest().map_err(fail("analyze"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [corpus]
        dumps = ["dump.ndjson"]
        from = "2019-12-01"
        to = "2020-11-30"
        [sample]
        size = 10
        seed = 1
        [annotation]
        annotators = ["dictionary", "m"]
        tasks = ["disorder", "severity"]
        gate_backend = "m"
        lexicon = "lex.json"
        [output]
        dir = "out"
        [[backends]]
        name = "m"
        kind = "mock"
    "#;

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp("2019-12-01", false).unwrap(), 1_575_158_400);
        assert_eq!(parse_timestamp("2020-11-30", true).unwrap(), 1_606_780_799);
        assert_eq!(
            parse_timestamp("2020-11-30T23:59:59Z", false).unwrap(),
            1_606_780_799
        );
        assert!(parse_timestamp("last tuesday", false).is_err());
    }

    #[test]
    fn valid_config() {
        let cfg = parse_config("run.toml", MINIMAL).unwrap();
        let v = cfg.validate().unwrap();
        assert_eq!(v.tasks, vec![TaskKind::Disorder, TaskKind::Severity]);
        assert_eq!(v.raw.folds.k, 5);
    }

    #[test]
    fn unknown_annotator_is_named() {
        let cfg = parse_config(
            "run.toml",
            &MINIMAL.replace("\"dictionary\", \"m\"", "\"dictionary\", \"gpt9\""),
        )
        .unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("gpt9"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        let dup = MINIMAL.replace("\"dictionary\", \"m\"", "\"m\", \"m\"");
        assert!(parse_config("r.toml", &dup).unwrap().validate().is_err());
        let k1 = format!("{MINIMAL}\n[folds]\nk = 1\n");
        // [folds] after [[backends]] is still a top-level table in TOML
        assert!(parse_config("r.toml", &k1).unwrap().validate().is_err());
        assert!(
            parse_config("r.toml", &MINIMAL.replace("size = 10", "size = 0"))
                .unwrap()
                .validate()
                .is_err()
        );
        assert!(parse_config("r.toml", &MINIMAL.replace("[output]", "[outptu]")).is_err());
    }
}
