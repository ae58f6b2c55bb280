//! Whole-pipeline runs over the shipped end-to-end fixture.

use std::path::{Path, PathBuf};

use mindlens_core::analyze::REPORT_FILES;
use mindlens_core::pipeline::{run_pipeline, RunConfig, StageStatus, STAGES};

fn fixture_config(out: &Path) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/e2e/run.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.output.dir = out.to_path_buf();
    cfg
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.join("reports")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn statuses(outcome: &mindlens_core::pipeline::RunOutcome) -> Vec<(String, StageStatus)> {
    outcome
        .manifest
        .stages
        .iter()
        .map(|s| (s.name.clone(), s.status))
        .collect()
}

#[test]
fn two_runs_produce_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&fixture_config(a.path()).validate().unwrap());
    let rb = run_pipeline(&fixture_config(b.path()).validate().unwrap());
    assert_eq!((ra.exit_code, rb.exit_code), (0, 0));
    assert_eq!(ra.manifest.status, "ok");
    let names: Vec<&str> = ra.manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, STAGES);

    let fa = report_files(a.path());
    let fb = report_files(b.path());
    for stem in REPORT_FILES {
        for ext in ["csv", "json"] {
            let rel = format!("reports/{stem}.{ext}");
            assert!(fa.iter().any(|(p, _)| *p == rel), "missing {rel}");
        }
    }
    assert_eq!(fa, fb);

    let ingest = &ra.manifest.stages[0].counts;
    assert_eq!(ingest["admitted"], 200);
    assert_eq!(ingest["parse_failures"], 1);
    assert_eq!(ingest["duplicates"], 1);
    assert_eq!(ingest["filtered_out"], 3);
    let training =
        std::fs::read_to_string(a.path().join("exports/llama3/training.ndjson")).unwrap();
    assert!(!training.contains("\"none\""));
}

#[test]
fn resume_reruns_only_missing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config(dir.path()).validate().unwrap();
    assert_eq!(run_pipeline(&cfg).exit_code, 0);
    let before = report_files(dir.path());

    std::fs::remove_dir_all(dir.path().join("reports")).unwrap();
    let again = run_pipeline(&cfg);
    assert_eq!(again.exit_code, 0);
    let ran: Vec<String> = statuses(&again)
        .into_iter()
        .filter(|(_, s)| *s == StageStatus::Ran)
        .map(|(n, _)| n)
        .collect();
    assert_eq!(ran, ["analyze"]);
    assert_eq!(report_files(dir.path()), before);
    // Skipped stages keep the counts of the run that produced their outputs.
    assert_eq!(again.manifest.stages[0].counts["admitted"], 200);

    let third = run_pipeline(&cfg);
    assert!(statuses(&third)
        .iter()
        .all(|(_, s)| *s == StageStatus::Skipped));
}

#[test]
fn failing_backend_gives_partial_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(dir.path());
    let mock = cfg.backends[1].mock.as_mut().unwrap();
    mock.fail_pattern = Some("(?i)hopeless".into());
    cfg.backends[1].max_retries = 0;
    let outcome = run_pipeline(&cfg.validate().unwrap());
    assert_eq!(outcome.exit_code, 3);
    assert_eq!(outcome.manifest.status, "partial");
    assert!(dir.path().join("reports/table4_severity.csv").exists());
}

#[test]
fn unknown_annotator_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(dir.path());
    cfg.annotation.annotators.push("samantha".into());
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("samantha"), "{err}");
}

#[test]
fn missing_dump_fails_the_ingest_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(dir.path());
    cfg.corpus.dumps = vec![dir.path().join("absent.ndjson")];
    let outcome = run_pipeline(&cfg.validate().unwrap());
    assert_eq!(outcome.exit_code, 2);
    let last = outcome.manifest.stages.last().unwrap();
    assert_eq!(
        (last.name.as_str(), last.status),
        ("ingest", StageStatus::Failed)
    );
    assert!(dir.path().join("manifest.json").exists());
}
