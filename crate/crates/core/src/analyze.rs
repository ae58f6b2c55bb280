//! Descriptive analytics over annotation records and the report bundle.
//!
//! Percentages are displayed with one decimal, rounded half-up in integer
//! arithmetic; JSON files keep full precision.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotateError, AnnotationRecord, RecordStore};
use crate::labels::DisorderLabel;
use crate::tasks::{BinaryVerdict, SeverityLevel, TaskKind, TherapyCode};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Records(#[from] AnnotateError),
}

/// `count / total` in tenths of a percent, rounded half-up.
pub fn percent_tenths(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (2 * count * 1000 + total) / (2 * total)
}

/// One-decimal display of `count / total` as a percentage.
pub fn percent_display(count: u64, total: u64) -> String {
    let t = percent_tenths(count, total);
    format!("{}.{}", t / 10, t % 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: String,
    pub count: u64,
    /// Full-precision percentage of `total`.
    pub percent: f64,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// Records counted in the percentages.
    pub total: u64,
    pub categories: Vec<CategoryShare>,
    /// Categories disclosed but left out of the percentages.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, u64>,
}

impl Distribution {
    fn from_counts(counts: &[(&str, u64)], excluded: BTreeMap<String, u64>) -> Self {
        let total = counts.iter().map(|c| c.1).sum();
        let categories = counts
            .iter()
            .map(|&(category, count)| CategoryShare {
                category: category.to_string(),
                count,
                percent: if total == 0 {
                    0.0
                } else {
                    count as f64 * 100.0 / total as f64
                },
                display: percent_display(count, total),
            })
            .collect();
        Self {
            total,
            categories,
            excluded,
        }
    }

    pub fn share(&self, category: &str) -> Option<&CategoryShare> {
        self.categories.iter().find(|c| c.category == category)
    }
}

/// Counts indexed Yes, No, Other; all three share the percentage basis.
pub fn binary_distribution(counts: &[u64; 3]) -> Distribution {
    let named: Vec<(&str, u64)> = BinaryVerdict::ALL
        .iter()
        .map(|v| v.as_str())
        .zip(counts.iter().copied())
        .collect();
    Distribution::from_counts(&named, BTreeMap::new())
}

/// Counts indexed Mild, Moderate, Severe, Other; `Other` is disclosed but
/// not part of the percentage basis.
pub fn severity_distribution(counts: &[u64; 4]) -> Distribution {
    let named: Vec<(&str, u64)> = SeverityLevel::ALL[..3]
        .iter()
        .map(|v| v.as_str())
        .zip(counts.iter().copied())
        .collect();
    let excluded = BTreeMap::from([(SeverityLevel::Other.as_str().to_string(), counts[3])]);
    Distribution::from_counts(&named, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub task: TaskKind,
    pub per_annotator: BTreeMap<String, Distribution>,
}

/// Binary or severity distribution per annotator. Failed severity calls
/// count as `Other`.
pub fn distribution(
    records: &BTreeMap<String, Vec<AnnotationRecord>>,
    task: TaskKind,
) -> DistributionReport {
    let mut per_annotator = BTreeMap::new();
    for (annotator, recs) in records {
        let d = match task {
            TaskKind::Binary => {
                let mut counts = [0u64; 3];
                for r in recs.iter().filter(|r| r.task == task) {
                    counts[r.binary.unwrap_or(BinaryVerdict::Other) as usize] += 1;
                }
                binary_distribution(&counts)
            }
            TaskKind::Severity => {
                let mut counts = [0u64; 4];
                for r in recs.iter().filter(|r| r.task == task) {
                    counts[r.severity.unwrap_or(SeverityLevel::Other) as usize] += 1;
                }
                severity_distribution(&counts)
            }
            _ => continue,
        };
        per_annotator.insert(annotator.clone(), d);
    }
    DistributionReport {
        task,
        per_annotator,
    }
}

// ---------------------------------------------------------------------------
// Label statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the annotator's total label occurrences (None included).
    #[default]
    PerOccurrence,
    /// Divide by the annotator's number of labeled posts.
    PerPost,
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-occurrence" => Ok(Self::PerOccurrence),
            "per-post" => Ok(Self::PerPost),
            _ => Err(format!(
                "unknown normalization `{s}` (expected per-post or per-occurrence)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelOptions {
    pub norm: Normalization,
    /// Count a `{None}` post as one label in the histogram.
    pub none_as_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorLabelStats {
    pub posts: u64,
    pub occurrences: u64,
    pub counts: BTreeMap<DisorderLabel, u64>,
    pub normalized_counts: BTreeMap<DisorderLabel, f64>,
    /// Posts by number of labels, buckets 0 through 9.
    pub labels_per_post_hist: BTreeMap<u8, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub options: LabelOptions,
    pub per_annotator: BTreeMap<String, AnnotatorLabelStats>,
}

/// Statistics for one annotator's disorder records; records without a
/// label set are skipped.
pub fn annotator_label_stats(
    records: &[AnnotationRecord],
    options: LabelOptions,
) -> AnnotatorLabelStats {
    let mut counts: BTreeMap<DisorderLabel, u64> =
        DisorderLabel::ALL.iter().map(|&d| (d, 0)).collect();
    let mut hist: BTreeMap<u8, u64> = (0..=9).map(|b| (b, 0)).collect();
    let mut posts = 0;
    for labels in records.iter().filter_map(|r| r.labels) {
        posts += 1;
        for d in labels.labels() {
            *counts.get_mut(&d).expect("all labels present") += 1;
        }
        let bucket = if labels.is_none() {
            u8::from(options.none_as_label)
        } else {
            labels.len() as u8
        };
        *hist.get_mut(&bucket).expect("bucket in range") += 1;
    }
    let occurrences: u64 = counts.values().sum();
    let basis = match options.norm {
        Normalization::PerOccurrence => occurrences,
        Normalization::PerPost => posts,
    };
    let normalized_counts = counts
        .iter()
        .map(|(&d, &c)| {
            (
                d,
                if basis == 0 {
                    0.0
                } else {
                    c as f64 / basis as f64
                },
            )
        })
        .collect();
    AnnotatorLabelStats {
        posts,
        occurrences,
        counts,
        normalized_counts,
        labels_per_post_hist: hist,
    }
}

pub fn label_stats(
    records: &BTreeMap<String, Vec<AnnotationRecord>>,
    options: LabelOptions,
) -> LabelStats {
    LabelStats {
        options,
        per_annotator: records
            .iter()
            .map(|(a, recs)| (a.clone(), annotator_label_stats(recs, options)))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Therapy map

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TherapyMap {
    pub cells: BTreeMap<DisorderLabel, BTreeMap<TherapyCode, u64>>,
    pub posts_joined: u64,
    /// Posts present in only one record set, or whose record lacks parsed output.
    pub unmatched: u64,
}

impl TherapyMap {
    pub fn get(&self, disorder: DisorderLabel, therapy: TherapyCode) -> u64 {
        self.cells
            .get(&disorder)
            .and_then(|m| m.get(&therapy))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.cells.values().flat_map(|m| m.values()).sum()
    }
}

/// Counts each (disorder, therapy) pair on the same post. A `{None}` post
/// contributes under `None`.
pub fn therapy_map(
    disorder_records: &[AnnotationRecord],
    therapy_records: &[AnnotationRecord],
) -> TherapyMap {
    let labels: BTreeMap<&str, &AnnotationRecord> = disorder_records
        .iter()
        .map(|r| (r.post_id.as_str(), r))
        .collect();
    let therapies: BTreeMap<&str, &AnnotationRecord> = therapy_records
        .iter()
        .map(|r| (r.post_id.as_str(), r))
        .collect();
    let mut map = TherapyMap::default();
    map.unmatched += labels
        .keys()
        .filter(|k| !therapies.contains_key(*k))
        .count() as u64;
    for (id, t) in &therapies {
        let (Some(d), Some(recs)) = (labels.get(id).and_then(|r| r.labels), t.therapies.as_ref())
        else {
            map.unmatched += 1;
            continue;
        };
        map.posts_joined += 1;
        for disorder in d.labels() {
            for rec in recs {
                *map.cells
                    .entry(disorder)
                    .or_default()
                    .entry(rec.code)
                    .or_default() += 1;
            }
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Report bundle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub binary: DistributionReport,
    pub severity: DistributionReport,
    pub labels: LabelStats,
    pub therapy: BTreeMap<String, TherapyMap>,
}

pub const REPORT_FILES: [&str; 5] = [
    "table1_binary",
    "table4_severity",
    "fig3_condition_counts",
    "fig4_label_counts",
    "therapy_map",
];

/// Latest record per post for one annotator and task, in post id order.
fn latest(
    store: &RecordStore,
    annotator: &str,
    task: TaskKind,
) -> Result<Vec<AnnotationRecord>, AnnotateError> {
    Ok(store.latest(annotator, task, None)?.into_values().collect())
}

pub fn build_reports(
    store: &RecordStore,
    options: LabelOptions,
) -> Result<ReportBundle, AnalyzeError> {
    let mut by_task: BTreeMap<TaskKind, BTreeMap<String, Vec<AnnotationRecord>>> = BTreeMap::new();
    for annotator in store.annotators()? {
        for task in [
            TaskKind::Binary,
            TaskKind::Disorder,
            TaskKind::Severity,
            TaskKind::RecommendTherapy,
        ] {
            let recs = latest(store, &annotator, task)?;
            if !recs.is_empty() {
                by_task
                    .entry(task)
                    .or_default()
                    .insert(annotator.clone(), recs);
            }
        }
    }
    Ok(bundle_from_records(&by_task, options))
}

pub fn bundle_from_records(
    by_task: &BTreeMap<TaskKind, BTreeMap<String, Vec<AnnotationRecord>>>,
    options: LabelOptions,
) -> ReportBundle {
    let empty = BTreeMap::new();
    let get = |t: TaskKind| by_task.get(&t).unwrap_or(&empty);
    let disorder = get(TaskKind::Disorder);
    let therapy = get(TaskKind::RecommendTherapy)
        .iter()
        .filter_map(|(a, t)| disorder.get(a).map(|d| (a.clone(), therapy_map(d, t))))
        .collect();
    ReportBundle {
        binary: distribution(get(TaskKind::Binary), TaskKind::Binary),
        severity: distribution(get(TaskKind::Severity), TaskKind::Severity),
        labels: label_stats(disorder, options),
        therapy,
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

fn distribution_rows(report: &DistributionReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (annotator, d) in &report.per_annotator {
        for c in &d.categories {
            rows.push(vec![
                annotator.clone(),
                c.category.clone(),
                c.count.to_string(),
                c.display.clone(),
                "counted".into(),
            ]);
        }
        for (category, count) in &d.excluded {
            rows.push(vec![
                annotator.clone(),
                category.clone(),
                count.to_string(),
                String::new(),
                "excluded".into(),
            ]);
        }
    }
    rows
}

/// Every file of the bundle as (relative path, bytes), in a fixed order.
pub fn render_reports(bundle: &ReportBundle) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let dist_header = ["annotator", "category", "count", "percent", "basis"];
    files.push((
        "table1_binary.csv".into(),
        csv_bytes(&dist_header, distribution_rows(&bundle.binary)),
    ));
    files.push(("table1_binary.json".into(), json_bytes(&bundle.binary)));
    files.push((
        "table4_severity.csv".into(),
        csv_bytes(&dist_header, distribution_rows(&bundle.severity)),
    ));
    files.push(("table4_severity.json".into(), json_bytes(&bundle.severity)));

    let mut fig3 = Vec::new();
    let mut fig4 = Vec::new();
    for (annotator, s) in &bundle.labels.per_annotator {
        let mut plot3 = Vec::new();
        for (d, c) in &s.counts {
            let f = s.normalized_counts[d];
            fig3.push(vec![
                annotator.clone(),
                d.display_name().into(),
                c.to_string(),
                f.to_string(),
            ]);
            plot3.push(vec![d.display_name().to_string(), f.to_string()]);
        }
        let mut plot4 = Vec::new();
        for (b, n) in &s.labels_per_post_hist {
            fig4.push(vec![annotator.clone(), b.to_string(), n.to_string()]);
            plot4.push(vec![b.to_string(), n.to_string()]);
        }
        files.push((
            format!("plot/fig3_condition_counts.{annotator}.csv"),
            csv_bytes(&["category", "value"], plot3),
        ));
        files.push((
            format!("plot/fig4_label_counts.{annotator}.csv"),
            csv_bytes(&["category", "value"], plot4),
        ));
    }
    files.push((
        "fig3_condition_counts.csv".into(),
        csv_bytes(&["annotator", "label", "count", "fraction"], fig3),
    ));
    files.push((
        "fig3_condition_counts.json".into(),
        json_bytes(&bundle.labels),
    ));
    files.push((
        "fig4_label_counts.csv".into(),
        csv_bytes(&["annotator", "labels_per_post", "posts"], fig4),
    ));
    let fig4_json: BTreeMap<&String, &BTreeMap<u8, u64>> = bundle
        .labels
        .per_annotator
        .iter()
        .map(|(a, s)| (a, &s.labels_per_post_hist))
        .collect();
    files.push((
        "fig4_label_counts.json".into(),
        json_bytes(&serde_json::json!({
            "none_as_label": bundle.labels.options.none_as_label,
            "per_annotator": fig4_json,
        })),
    ));

    let mut therapy_rows = Vec::new();
    for (annotator, map) in &bundle.therapy {
        for (d, row) in &map.cells {
            for (t, n) in row {
                therapy_rows.push(vec![
                    annotator.clone(),
                    d.display_name().into(),
                    t.as_str().into(),
                    n.to_string(),
                ]);
            }
        }
    }
    files.push((
        "therapy_map.csv".into(),
        csv_bytes(&["annotator", "disorder", "therapy", "count"], therapy_rows),
    ));
    files.push(("therapy_map.json".into(), json_bytes(&bundle.therapy)));
    files
}

/// Writes the bundle under `out_dir`, overwriting earlier files. Returns the
/// relative paths written.
pub fn emit_reports(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<String>, AnalyzeError> {
    let mut written = Vec::new();
    for (rel, bytes) in render_reports(bundle) {
        let path = out_dir.join(&rel);
        let wrap = |source| AnalyzeError::Write {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(wrap)?;
        }
        fs::write(&path, bytes).map_err(wrap)?;
        written.push(rel);
    }
    Ok(written)
}
