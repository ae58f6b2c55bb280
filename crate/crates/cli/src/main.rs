//! `mindlens` command line: one subcommand per pipeline stage plus `run`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 finished but some backend calls failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mindlens_core::analyze::{self, LabelOptions, Normalization};
use mindlens_core::annotate::{
    export_training_set, run_annotator, run_binary_filter, write_export, Annotator, AnnotatorId,
    AnnotatorKind, RecordStore,
};
use mindlens_core::corpus::{self, CorpusFilter, SampleSpec};
use mindlens_core::evaluate::{self, make_folds, FOLDS_FILE};
use mindlens_core::gateway::{self, BackendsFile, Gateway};
use mindlens_core::lexicon::Lexicon;
use mindlens_core::pipeline::{self, RunConfig};
use mindlens_core::tasks::{TaskKind, TemplatePack};
use mindlens_core::Post;

macro_rules! print_json {
    ($value:expr) => {
        println!(
            "{}",
            serde_json::to_string_pretty($value).expect("serializable")
        )
    };
}

#[derive(Parser)]
#[command(
    name = "mindlens",
    version,
    about = "Annotate and analyze mental-health discourse in post corpora"
)]
struct Cli {
    /// Backend definitions: a backends file or a run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read dump files into a canonical corpus.
    Ingest(IngestArgs),
    /// Draw a seeded random sample.
    Sample(SampleArgs),
    /// Ask a backend whether each post concerns mental health.
    Filter(FilterArgs),
    /// Label posts with the dictionary and LLM annotators.
    Annotate(AnnotateArgs),
    /// Write one annotator's training set, stats and folds.
    Export(ExportArgs),
    /// Score imported predictions and build the comparison table.
    Evaluate(EvaluateArgs),
    /// Emit distribution and label reports from a record store.
    Analyze(AnalyzeArgs),
    /// Time a backend over a prompt file.
    Bench(BenchArgs),
    /// Run every stage from a run configuration.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Output directory; overrides `output.dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    communities: Option<Vec<String>>,
    #[arg(long)]
    from: Option<String>,
    #[arg(long)]
    to: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, default_value = "v1")]
    prompt_version: String,
    /// Directory holding prompt packs as `<dir>/<version>/`.
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long)]
    records: PathBuf,
    /// Also write the relevant posts as a corpus.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    prompts: PromptArgs,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    annotators: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "disorder")]
    tasks: Vec<String>,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Backend whose yes/no verdicts gate the posts.
    #[arg(long)]
    gate_backend: Option<String>,
    /// Annotate every post instead of only relevant ones.
    #[arg(long)]
    no_gate: bool,
    #[command(flatten)]
    prompts: PromptArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    annotator: String,
    #[arg(long)]
    records: PathBuf,
    /// Corpus the records were made from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt version of the records to export (default: latest per post).
    #[arg(long)]
    prompt_version: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `<dir>/<annotator>/<model>/*.ndjson`.
    #[arg(long)]
    predictions: PathBuf,
    /// Export root holding `<annotator>/training.ndjson`.
    #[arg(long)]
    exports: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    none_as_label: bool,
    #[arg(long, default_value = "per-occurrence")]
    norm: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    backend: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// An error with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::Filter(a) => filter(a, config),
        Command::Annotate(a) => annotate(a, config),
        Command::Export(a) => export(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Bench(a) => bench(a, config),
        Command::Run(a) => run(a, config),
    }
}

fn ingest(a: IngestArgs) -> CmdResult {
    let start = a
        .from
        .as_deref()
        .map(|s| pipeline::parse_timestamp(s, false))
        .transpose()
        .map_err(|e| invalid(anyhow!(e)))?;
    let end =
        a.to.as_deref()
            .map(|s| pipeline::parse_timestamp(s, true))
            .transpose()
            .map_err(|e| invalid(anyhow!(e)))?;
    let filter = CorpusFilter::new(
        a.communities.as_ref(),
        start.unwrap_or(i64::MIN),
        end.unwrap_or(i64::MAX),
    )
    .map_err(|e| invalid(e.into()))?;
    let (posts, stats) = corpus::ingest_files(&a.input, &filter).map_err(|e| runtime(e.into()))?;
    corpus::write_corpus(&a.out, &posts).map_err(|e| runtime(e.into()))?;
    print_json!(&stats);
    Ok(0)
}

fn sample(a: SampleArgs) -> CmdResult {
    let spec = SampleSpec::new(a.n, a.seed).map_err(|e| invalid(e.into()))?;
    let posts = corpus::read_corpus(&a.input).map_err(|e| runtime(e.into()))?;
    let out = corpus::sample(&posts, spec);
    corpus::write_corpus(&a.out, &out).map_err(|e| runtime(e.into()))?;
    log::info!("sampled {} of {} posts", out.len(), posts.len());
    Ok(0)
}

/// Backends from `--config`, which may be a backends file or a run config.
fn load_backends(config: Option<&Path>) -> Result<BackendsFile, Failure> {
    let path = config.ok_or_else(|| invalid(anyhow!("--config is required to define backends")))?;
    let file = match BackendsFile::load(path) {
        Ok(f) => f,
        Err(first) => {
            let run = RunConfig::load(path)
                .map_err(|e| invalid(anyhow!("{first}; as a run config: {e}")))?;
            BackendsFile {
                backends: run.backends,
            }
        }
    };
    file.validate().map_err(|e| invalid(e.into()))?;
    Ok(file)
}

fn gateway_for(backends: &BackendsFile, name: &str) -> Result<Gateway, Failure> {
    let cfg = backends.get(name).map_err(|e| invalid(e.into()))?;
    Gateway::from_config(cfg).map_err(|e| invalid(e.into()))
}

fn pack(p: &PromptArgs) -> Result<TemplatePack, Failure> {
    TemplatePack::resolve(&p.prompt_version, p.prompts_dir.as_deref())
        .map_err(|e| invalid(e.into()))
}

fn filter(a: FilterArgs, config: Option<&Path>) -> CmdResult {
    let backends = load_backends(config)?;
    let gw = gateway_for(&backends, &a.backend)?;
    let pack = pack(&a.prompts)?;
    let posts = corpus::read_corpus(&a.input).map_err(|e| runtime(e.into()))?;
    let store = RecordStore::new(&a.records);
    let f = run_binary_filter(&posts, &gw, &pack, &store).map_err(|e| runtime(e.into()))?;
    store
        .compact(&a.backend, TaskKind::Binary)
        .map_err(|e| runtime(e.into()))?;
    if let Some(out) = &a.out {
        let admitted: Vec<Post> = f.admitted(&posts).into_iter().cloned().collect();
        corpus::write_corpus(out, &admitted).map_err(|e| runtime(e.into()))?;
    }
    print_json!(&f.distribution);
    Ok(if f.outcome.failures > 0 { 3 } else { 0 })
}

fn annotate(a: AnnotateArgs, config: Option<&Path>) -> CmdResult {
    let pack = pack(&a.prompts)?;
    let mut ids = Vec::new();
    for name in &a.annotators {
        let id: AnnotatorId = name
            .parse()
            .map_err(|e: mindlens_core::annotate::AnnotateError| invalid(e.into()))?;
        if ids.contains(&id) {
            return Err(invalid(anyhow!("annotator `{}` is listed twice", id.name)));
        }
        ids.push(id);
    }
    let mut tasks = Vec::new();
    for t in &a.tasks {
        let task: TaskKind = t
            .parse()
            .map_err(|e: mindlens_core::tasks::TaskError| invalid(e.into()))?;
        if task == TaskKind::Binary {
            return Err(invalid(anyhow!(
                "use the filter command for the binary task"
            )));
        }
        tasks.push(task);
    }
    let needs_backends =
        a.gate_backend.is_some() || ids.iter().any(|i| i.kind == AnnotatorKind::Llm);
    let backends = if needs_backends {
        load_backends(config)?
    } else {
        BackendsFile {
            backends: Vec::new(),
        }
    };
    let mut gateways = Vec::new();
    for id in ids.iter().filter(|i| i.kind == AnnotatorKind::Llm) {
        gateways.push(gateway_for(&backends, &id.name)?);
    }
    let lexicon = if ids.iter().any(|i| i.kind == AnnotatorKind::Dictionary) {
        let path = a
            .lexicon
            .as_ref()
            .ok_or_else(|| invalid(anyhow!("the dictionary annotator needs --lexicon")))?;
        Some(Lexicon::load(path).map_err(|e| invalid(e.into()))?)
    } else {
        None
    };
    let posts = corpus::read_corpus(&a.input).map_err(|e| runtime(e.into()))?;
    let store = RecordStore::new(&a.records);
    let posts: Vec<Post> = match (&a.gate_backend, a.no_gate) {
        (_, true) => posts,
        (Some(name), false) => {
            let gw = gateway_for(&backends, name)?;
            let f = run_binary_filter(&posts, &gw, &pack, &store).map_err(|e| runtime(e.into()))?;
            f.admitted(&posts).into_iter().cloned().collect()
        }
        (None, false) => {
            return Err(invalid(anyhow!(
                "pass --gate-backend NAME, or --no-gate to annotate every post"
            )))
        }
    };
    let matcher = lexicon.as_ref().map(Lexicon::matcher);
    let mut failures = 0;
    let mut summary = serde_json::Map::new();
    let mut llm = gateways.iter();
    for id in &ids {
        let (annotator, tasks) = match id.kind {
            AnnotatorKind::Dictionary => (
                Annotator::dictionary(
                    matcher.as_ref().expect("lexicon"),
                    lexicon.as_ref().expect("lexicon"),
                ),
                tasks
                    .iter()
                    .copied()
                    .filter(|t| *t == TaskKind::Disorder)
                    .collect::<Vec<_>>(),
            ),
            AnnotatorKind::Llm => (
                Annotator::Llm(llm.next().expect("gateway per llm annotator")),
                tasks.clone(),
            ),
        };
        for o in run_annotator(&posts, &annotator, &tasks, &pack, &store)
            .map_err(|e| runtime(e.into()))?
        {
            failures += o.failures;
            store
                .compact(&id.name, o.task)
                .map_err(|e| runtime(e.into()))?;
            summary.insert(
                format!("{}/{}", id.name, o.task),
                serde_json::json!({"records": o.records.len(), "reused": o.reused, "failures": o.failures}),
            );
        }
    }
    print_json!(&summary);
    Ok(if failures > 0 { 3 } else { 0 })
}

fn export(a: ExportArgs) -> CmdResult {
    if a.k < 2 {
        return Err(invalid(anyhow!("--k must be at least 2")));
    }
    let id: AnnotatorId = a
        .annotator
        .parse()
        .map_err(|e: mindlens_core::annotate::AnnotateError| invalid(e.into()))?;
    let store = RecordStore::new(&a.records);
    let records: Vec<_> = store
        .latest(&id.name, TaskKind::Disorder, a.prompt_version.as_deref())
        .map_err(|e| runtime(e.into()))?
        .into_values()
        .collect();
    if records.is_empty() {
        return Err(invalid(anyhow!(
            "no disorder records for annotator `{}` in {}",
            id.name,
            a.records.display()
        )));
    }
    let posts = corpus::read_corpus(&a.corpus).map_err(|e| runtime(e.into()))?;
    let (examples, stats) = export_training_set(&records, &posts).map_err(|e| runtime(e.into()))?;
    write_export(&a.out, &examples, &stats).map_err(|e| runtime(e.into()))?;
    let ids: Vec<&str> = examples.iter().map(|e| e.post_id.as_str()).collect();
    let folds = make_folds(&ids, a.k, a.seed).map_err(|e| runtime(e.into()))?;
    folds
        .write(&a.out.join(FOLDS_FILE))
        .map_err(|e| runtime(e.into()))?;
    print_json!(&stats);
    Ok(0)
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    let table =
        evaluate::build_comparison(&a.predictions, &a.exports).map_err(|e| runtime(e.into()))?;
    table.write(&a.out).map_err(|e| runtime(e.into()))?;
    print!("{}", table.to_csv());
    if table.rows.is_empty() {
        return Err(invalid(anyhow!(
            "no predictions found under {}",
            a.predictions.display()
        )));
    }
    Ok(0)
}

fn analyze_cmd(a: AnalyzeArgs) -> CmdResult {
    let norm: Normalization = a.norm.parse().map_err(|e: String| invalid(anyhow!(e)))?;
    let store = RecordStore::new(&a.records);
    let bundle = analyze::build_reports(
        &store,
        LabelOptions {
            norm,
            none_as_label: a.none_as_label,
        },
    )
    .map_err(|e| runtime(e.into()))?;
    let written = analyze::emit_reports(&bundle, &a.out).map_err(|e| runtime(e.into()))?;
    log::info!(
        "wrote {} report files to {}",
        written.len(),
        a.out.display()
    );
    Ok(0)
}

fn bench(a: BenchArgs, config: Option<&Path>) -> CmdResult {
    let backends = load_backends(config)?;
    let gw = gateway_for(&backends, &a.backend)?;
    let prompts = gateway::read_prompts(&a.input).map_err(|e| invalid(e.into()))?;
    if prompts.is_empty() {
        return Err(invalid(anyhow!("{} holds no prompts", a.input.display())));
    }
    let report = gateway::bench(&gw, &prompts).map_err(|e| runtime(e.into()))?;
    let failures = report.failures;
    print_json!(&report);
    gateway::write_bench(&a.out, vec![report]).map_err(|e| runtime(e.into()))?;
    Ok(if failures > 0 { 3 } else { 0 })
}

fn run(a: RunArgs, config: Option<&Path>) -> CmdResult {
    let path = config.ok_or_else(|| invalid(anyhow!("run needs --config FILE")))?;
    let mut cfg = RunConfig::load(path).map_err(|e| invalid(e.into()))?;
    if let Some(out) = a.out {
        cfg.output.dir = out;
    }
    let validated = cfg
        .validate()
        .with_context(|| format!("invalid configuration {}", path.display()))
        .map_err(invalid)?;
    let outcome = pipeline::run_pipeline(&validated);
    for s in &outcome.manifest.stages {
        log::info!("{:<9} {:?} ({} ms)", s.name, s.status, s.duration_ms);
    }
    if outcome.exit_code == 2 {
        let note = outcome
            .manifest
            .stages
            .last()
            .and_then(|s| s.note.clone())
            .unwrap_or_default();
        return Err(runtime(anyhow!("pipeline failed: {note}")));
    }
    Ok(outcome.exit_code as u8)
}
