//! Fold assignment, multi-label metrics and the model comparison table.
//!
//! Predictions arrive as NDJSON files from an external trainer, laid out as
//! `<predictions>/<annotator>/<model>/*.ndjson` with an optional
//! `train_report.json` beside them. Gold labels come from the matching
//! training export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{read_training, AnnotateError, TRAINING_FILE};
use crate::labels::{DisorderLabel, LabelSet, LabelSetError};
use crate::rng;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("cannot split {n} ids into {k} folds")]
    TooFewIds { n: usize, k: usize },
    #[error("fold count must be at least 1")]
    ZeroFolds,
    #[error("duplicate post id `{0}`")]
    DuplicateId(String),
    #[error("gold and predicted lists differ in length ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no fold reports to aggregate")]
    NoReports,
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
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label `{label}`")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("{path}: post `{post_id}` is not in the gold set")]
    UnknownPost { path: String, post_id: String },
    #[error("{path}: post `{post_id}` predicted in fold {found}, assigned to fold {expected}")]
    FoldMismatch {
        path: String,
        post_id: String,
        found: usize,
        expected: usize,
    },
    #[error(transparent)]
    Export(#[from] AnnotateError),
}

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// Sorts ids, shuffles them with the seed, then deals position `i` into
/// fold `i mod k`. The result depends only on the id set, `k` and `seed`.
pub fn make_folds<S: AsRef<str>>(
    ids: &[S],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, EvaluateError> {
    if k == 0 {
        return Err(EvaluateError::ZeroFolds);
    }
    let mut sorted: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvaluateError::DuplicateId(w[0].to_string()));
    }
    if sorted.len() < k {
        return Err(EvaluateError::TooFewIds { n: sorted.len(), k });
    }
    rng::shuffle(&mut sorted, seed);
    let assignment = sorted
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment {
        k,
        seed,
        assignment,
    })
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// CSV with header `post_id,fold`, rows sorted by post id.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["post_id", "fold"]).expect("in-memory csv");
        for (id, fold) in &self.assignment {
            w.write_record([id.as_str(), &fold.to_string()])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn write(&self, path: &Path) -> Result<(), EvaluateError> {
        fs::write(path, self.to_csv()).map_err(|source| EvaluateError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a folds file; `k` is one more than the largest fold index and
    /// `seed` is unknown (0).
    pub fn read(path: &Path) -> Result<Self, EvaluateError> {
        let shown = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|e| EvaluateError::Malformed {
            path: shown.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut assignment = BTreeMap::new();
        for (i, row) in r.deserialize::<(String, usize)>().enumerate() {
            let (id, fold) = row.map_err(|e| EvaluateError::Malformed {
                path: shown.clone(),
                line: i + 2,
                message: e.to_string(),
            })?;
            if assignment.insert(id.clone(), fold).is_some() {
                return Err(EvaluateError::DuplicateId(id));
            }
        }
        let k = assignment.values().max().map_or(0, |m| m + 1);
        Ok(Self {
            k,
            seed: 0,
            assignment,
        })
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset_accuracy: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_label: BTreeMap<DisorderLabel, LabelScore>,
    pub n_examples: usize,
    /// Labels with no gold occurrence; left out of the macro means.
    pub zero_support_labels: usize,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Multi-label scores over aligned gold and predicted sets. `{None}` is the
/// empty set. When there is nothing to find and nothing predicted, micro
/// precision, recall and F1 are 1.
pub fn score(gold: &[LabelSet], pred: &[LabelSet]) -> Result<MetricsReport, EvaluateError> {
    if gold.len() != pred.len() {
        return Err(EvaluateError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut tp = [0u64; 9];
    let mut fp = [0u64; 9];
    let mut fn_ = [0u64; 9];
    let mut exact = 0u64;
    for (&g, &p) in gold.iter().zip(pred) {
        exact += u64::from(g == p);
        let (g, p) = (g.bits(), p.bits());
        for i in 0..9 {
            let (gi, pi) = (g >> i & 1 == 1, p >> i & 1 == 1);
            tp[i] += u64::from(gi && pi);
            fp[i] += u64::from(!gi && pi);
            fn_[i] += u64::from(gi && !pi);
        }
    }
    let (stp, sfp, sfn): (u64, u64, u64) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let nothing = stp + sfp + sfn == 0;
    let micro_precision = ratio(stp, stp + sfp, if nothing { 1.0 } else { 0.0 });
    let micro_recall = ratio(stp, stp + sfn, if nothing { 1.0 } else { 0.0 });

    let mut per_label = BTreeMap::new();
    let (mut mp, mut mr, mut mf, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for (i, d) in DisorderLabel::DISORDERS.into_iter().enumerate() {
        let support = tp[i] + fn_[i];
        let precision = ratio(tp[i], tp[i] + fp[i], 0.0);
        let recall = ratio(tp[i], support, 0.0);
        let s = LabelScore {
            precision,
            recall,
            f1: f1(precision, recall),
            support,
        };
        if support > 0 {
            mp += s.precision;
            mr += s.recall;
            mf += s.f1;
            counted += 1;
        }
        per_label.insert(d, s);
    }
    let mean = |x: f64| {
        if counted == 0 {
            0.0
        } else {
            x / counted as f64
        }
    };
    Ok(MetricsReport {
        subset_accuracy: ratio(exact, gold.len() as u64, 0.0),
        micro_precision,
        micro_recall,
        micro_f1: f1(micro_precision, micro_recall),
        macro_precision: mean(mp),
        macro_recall: mean(mr),
        macro_f1: mean(mf),
        per_label,
        n_examples: gold.len(),
        zero_support_labels: 9 - counted,
    })
}

/// Scalar fields of a report, in declaration order.
pub const METRIC_FIELDS: [&str; 7] = [
    "subset_accuracy",
    "micro_precision",
    "micro_recall",
    "micro_f1",
    "macro_precision",
    "macro_recall",
    "macro_f1",
];

impl MetricsReport {
    pub fn metric(&self, field: &str) -> Option<f64> {
        Some(match field {
            "subset_accuracy" => self.subset_accuracy,
            "micro_precision" => self.micro_precision,
            "micro_recall" => self.micro_recall,
            "micro_f1" => self.micro_f1,
            "macro_precision" => self.macro_precision,
            "macro_recall" => self.macro_recall,
            "macro_f1" => self.macro_f1,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation; 0 for a single fold.
    pub stddev: BTreeMap<String, f64>,
    pub n_examples: usize,
}

pub fn mean_and_stddev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_folds(per_fold: &[MetricsReport]) -> Result<AggregateReport, EvaluateError> {
    if per_fold.is_empty() {
        return Err(EvaluateError::NoReports);
    }
    let mut mean = BTreeMap::new();
    let mut stddev = BTreeMap::new();
    for field in METRIC_FIELDS {
        let values: Vec<f64> = per_fold
            .iter()
            .map(|r| r.metric(field).expect("known field"))
            .collect();
        let (m, s) = mean_and_stddev(&values);
        mean.insert(field.to_string(), m);
        stddev.insert(field.to_string(), s);
    }
    Ok(AggregateReport {
        folds: per_fold.len(),
        mean,
        stddev,
        n_examples: per_fold.iter().map(|r| r.n_examples).sum(),
    })
}

// ---------------------------------------------------------------------------
// Prediction import and comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub post_id: String,
    pub fold: usize,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

/// Trainer self-report; only the per-fold training accuracy is used.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrainReport {
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(alias = "train_accuracy")]
    pub per_fold_train_accuracy: Vec<f64>,
}

pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const FOLDS_FILE: &str = "folds.csv";

/// Parsed predictions of one model: (post id, fold, label set).
pub fn read_predictions(path: &Path) -> Result<Vec<(String, usize, LabelSet)>, EvaluateError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| EvaluateError::Read {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvaluateError::Read {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| EvaluateError::Malformed {
                path: shown.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        let labels = LabelSet::parse_labels(&rec.labels).map_err(|e| match e {
            LabelSetError::Unknown(u) => EvaluateError::UnknownLabel {
                path: shown.clone(),
                line: i + 1,
                label: u.0,
            },
            other => EvaluateError::Malformed {
                path: shown.clone(),
                line: i + 1,
                message: other.to_string(),
            },
        })?;
        out.push((rec.post_id, rec.fold, labels));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub annotator: String,
    pub model: String,
    pub train_acc_pct: Option<f64>,
    pub val_acc_pct: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: String,
    pub aggregate: AggregateReport,
    pub per_fold: BTreeMap<usize, MetricsReport>,
    /// Predictions of `{None}`, left out of scoring.
    pub none_predictions_excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Scores one model's predictions against the gold export, per fold.
pub fn compare_model(
    annotator: &str,
    model: &str,
    model_dir: &Path,
    gold: &HashMap<String, LabelSet>,
    folds: Option<&FoldAssignment>,
) -> Result<Option<ComparisonRow>, EvaluateError> {
    let mut files: Vec<_> = fs::read_dir(model_dir)
        .map_err(|source| EvaluateError::Read {
            path: model_dir.display().to_string(),
            source,
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
        .collect();
    files.sort();
    let mut by_fold: BTreeMap<usize, (Vec<LabelSet>, Vec<LabelSet>)> = BTreeMap::new();
    let mut none_excluded = 0;
    let mut any = false;
    for path in &files {
        for (post_id, fold, labels) in read_predictions(path)? {
            any = true;
            let shown = || path.display().to_string();
            let g = *gold
                .get(&post_id)
                .ok_or_else(|| EvaluateError::UnknownPost {
                    path: shown(),
                    post_id: post_id.clone(),
                })?;
            if let Some(expected) = folds.and_then(|f| f.assignment.get(&post_id)) {
                if *expected != fold {
                    return Err(EvaluateError::FoldMismatch {
                        path: shown(),
                        post_id,
                        found: fold,
                        expected: *expected,
                    });
                }
            }
            if labels.is_none() {
                none_excluded += 1;
                continue;
            }
            let entry = by_fold.entry(fold).or_default();
            entry.0.push(g);
            entry.1.push(labels);
        }
    }
    if !any {
        return Ok(None);
    }
    let mut per_fold = BTreeMap::new();
    for (fold, (g, p)) in by_fold {
        per_fold.insert(fold, score(&g, &p)?);
    }
    let reports: Vec<MetricsReport> = per_fold.values().cloned().collect();
    let aggregate = aggregate_folds(&reports)?;
    let train_path = model_dir.join(TRAIN_REPORT_FILE);
    let train_acc_pct = if train_path.exists() {
        let raw = fs::read_to_string(&train_path).map_err(|source| EvaluateError::Read {
            path: train_path.display().to_string(),
            source,
        })?;
        let report: TrainReport =
            serde_json::from_str(&raw).map_err(|e| EvaluateError::Malformed {
                path: train_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        (!report.per_fold_train_accuracy.is_empty())
            .then(|| mean_and_stddev(&report.per_fold_train_accuracy).0 * 100.0)
    } else {
        None
    };
    Ok(Some(ComparisonRow {
        annotator: annotator.to_string(),
        model: model.to_string(),
        train_acc_pct,
        val_acc_pct: aggregate.mean["subset_accuracy"] * 100.0,
        precision: aggregate.mean["micro_precision"],
        recall: aggregate.mean["micro_recall"],
        f1: aggregate.mean["micro_f1"],
        averaging: "micro".into(),
        aggregate,
        per_fold,
        none_predictions_excluded: none_excluded,
    }))
}

fn subdirs(dir: &Path) -> Result<Vec<String>, EvaluateError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|source| EvaluateError::Read {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// One row per (annotator, model) directory holding predictions. Gold sets
/// are read from `<exports>/<annotator>/training.ndjson`, and fold
/// membership is checked against `folds.csv` there when present.
pub fn build_comparison(
    predictions: &Path,
    exports: &Path,
) -> Result<ComparisonTable, EvaluateError> {
    let mut table = ComparisonTable::default();
    if !predictions.exists() {
        return Ok(table);
    }
    for annotator in subdirs(predictions)? {
        let gold_dir = exports.join(&annotator);
        let gold: HashMap<String, LabelSet> = read_training(&gold_dir.join(TRAINING_FILE))?
            .into_iter()
            .map(|e| (e.post_id, e.labels))
            .collect();
        let folds_path = gold_dir.join(FOLDS_FILE);
        let folds = if folds_path.exists() {
            Some(FoldAssignment::read(&folds_path)?)
        } else {
            None
        };
        for model in subdirs(&predictions.join(&annotator))? {
            let dir = predictions.join(&annotator).join(&model);
            if let Some(row) = compare_model(&annotator, &model, &dir, &gold, folds.as_ref())? {
                table.rows.push(row);
            }
        }
    }
    Ok(table)
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "annotator",
            "model",
            "train_acc_pct",
            "val_acc_pct",
            "precision",
            "recall",
            "f1",
            "averaging",
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.annotator.clone(),
                r.model.clone(),
                r.train_acc_pct
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
                format!("{:.2}", r.val_acc_pct),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
                r.averaging.clone(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    /// Writes `comparison.csv` and `comparison.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvaluateError> {
        let wrap = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvaluateError::Write { path, source }
        };
        fs::create_dir_all(dir).map_err(wrap(dir))?;
        let csv_path = dir.join("comparison.csv");
        fs::write(&csv_path, self.to_csv()).map_err(wrap(&csv_path))?;
        let json_path = dir.join("comparison.json");
        fs::write(&json_path, self.to_json()).map_err(wrap(&json_path))
    }
}

/// Member ids of each fold.
pub fn fold_members(folds: &FoldAssignment) -> Vec<BTreeSet<&str>> {
    let mut out = vec![BTreeSet::new(); folds.k];
    for (id, &f) in &folds.assignment {
        out[f].insert(id.as_str());
    }
    out
}
