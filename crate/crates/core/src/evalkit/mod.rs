//! Exact-match and caption scoring, reports, and the list-task penalty
//! diagnostic for unlabeled objects.

pub mod cider;
pub mod run;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tasksynth::TaskKind;

pub use cider::{cider, CiderConfig, CiderResult, CiderScorer};
pub use run::{eval_items, evaluate, ground_truth_items, holdout_images, predict, EvalOptions};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("item `{0}` has no ground-truth answers")]
    EmptyGroundTruth(String),
    #[error("no ground truth for prediction `{0}`")]
    UnknownId(String),
    #[error("no prediction for item `{0}`")]
    MissingPrediction(String),
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Lowercases, trims, collapses internal whitespace and drops one terminal
/// period.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
    if s.ends_with('.') {
        s.pop();
        s.truncate(s.trim_end().len());
    }
    s
}

/// True iff the normalized prediction equals any normalized ground truth.
pub fn exact_match<S: AsRef<str>>(prediction: &str, ground_truths: &[S]) -> Result<bool> {
    if ground_truths.is_empty() {
        return Err(EvalError::EmptyGroundTruth(prediction.to_owned()));
    }
    let p = normalize_answer(prediction);
    Ok(ground_truths.iter().any(|g| normalize_answer(g.as_ref()) == p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    Cider,
}

impl Metric {
    /// Caption generation is scored by consensus, everything else by exact
    /// match.
    pub fn for_kind(kind: TaskKind) -> Self {
        if kind == TaskKind::Caption {
            Metric::Cider
        } else {
            Metric::ExactMatch
        }
    }
}

/// One scored question. Also the ground-truth line format for offline
/// scoring, where `prediction` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub image_id: String,
    #[serde(default)]
    pub prediction: String,
    pub ground_truths: Vec<String>,
    /// Normalized names of objects present in the image but not labeled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden_objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub normalization: String,
    pub cider: CiderConfig,
    /// Forces one metric for every task instead of the per-kind default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            normalization: "lowercase, trim, collapse whitespace, strip terminal period".into(),
            cider: CiderConfig::default(),
            metric: None,
        }
    }
}

impl EvalSettings {
    pub fn metric_for(&self, kind: TaskKind) -> Metric {
        self.metric.unwrap_or_else(|| Metric::for_kind(kind))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub id: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub prediction: String,
    pub score: f64,
    /// Wrong only because the prediction names unlabeled objects.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub penalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub metric: Metric,
    pub items: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub tasks: BTreeMap<TaskKind, TaskSummary>,
    pub items: Vec<ItemVerdict>,
    /// List items scored wrong solely for naming unlabeled objects; present
    /// when any list item carries hidden objects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<usize>,
}

impl EvalReport {
    pub fn mean(&self, kind: TaskKind) -> Option<f64> {
        self.tasks.get(&kind).map(|t| t.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Splits a list answer into its object names.
fn list_names(text: &str) -> Vec<String> {
    normalize_answer(text).split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

/// True when `prediction` misses but would match after dropping the names
/// in `hidden`.
pub fn penalized_by_hidden<S: AsRef<str>>(prediction: &str, ground_truths: &[S], hidden: &[String]) -> Result<bool> {
    if hidden.is_empty() || exact_match(prediction, ground_truths)? {
        return Ok(false);
    }
    let names = list_names(prediction);
    let kept: Vec<String> = names.iter().filter(|n| !hidden.contains(n)).cloned().collect();
    if kept.len() == names.len() {
        return Ok(false);
    }
    exact_match(&kept.join(", "), ground_truths)
}

/// Scores items and aggregates per task kind.
pub fn score_items(items: &[EvalItem], settings: &EvalSettings) -> Result<EvalReport> {
    let mut seen = std::collections::HashSet::new();
    for it in items {
        if it.ground_truths.is_empty() {
            return Err(EvalError::EmptyGroundTruth(it.id.clone()));
        }
        if !seen.insert(it.id.as_str()) {
            return Err(EvalError::DuplicateId(it.id.clone()));
        }
    }
    let cider_refs: Vec<Vec<String>> = items
        .iter()
        .filter(|it| settings.metric_for(it.kind) == Metric::Cider)
        .map(|it| it.ground_truths.clone())
        .collect();
    let scorer = CiderScorer::new(&cider_refs, settings.cider);

    let mut verdicts = Vec::with_capacity(items.len());
    let mut penalties = None;
    for it in items {
        let metric = settings.metric_for(it.kind);
        let score = match metric {
            Metric::ExactMatch => f64::from(u8::from(exact_match(&it.prediction, &it.ground_truths)?)),
            Metric::Cider => scorer.score(&it.prediction, &it.ground_truths),
        };
        let mut penalized = false;
        if it.kind == TaskKind::OaList && !it.hidden_objects.is_empty() {
            penalized = metric == Metric::ExactMatch
                && penalized_by_hidden(&it.prediction, &it.ground_truths, &it.hidden_objects)?;
            *penalties.get_or_insert(0) += usize::from(penalized);
        }
        verdicts.push(ItemVerdict {
            id: it.id.clone(),
            kind: it.kind,
            metric,
            prediction: it.prediction.clone(),
            score,
            penalized,
        });
    }

    let mut sums: BTreeMap<TaskKind, (Metric, usize, f64)> = BTreeMap::new();
    for v in &verdicts {
        let e = sums.entry(v.kind).or_insert((v.metric, 0, 0.0));
        e.1 += 1;
        e.2 += v.score;
    }
    let tasks = sums
        .into_iter()
        .map(|(k, (metric, n, sum))| (k, TaskSummary { metric, items: n, mean: sum / n as f64 }))
        .collect();
    Ok(EvalReport { settings: settings.clone(), tasks, items: verdicts, penalties })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_lines(path)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<EvalItem>> {
    read_lines(path)
}

/// JSONL body, one value per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Attaches predictions to ground-truth items by id. Every item needs
/// exactly one prediction.
pub fn join_predictions(mut items: Vec<EvalItem>, predictions: &[Prediction]) -> Result<Vec<EvalItem>> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(&p.id, &p.prediction).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    for it in &mut items {
        let p = by_id.remove(it.id.as_str()).ok_or_else(|| EvalError::MissingPrediction(it.id.clone()))?;
        it.prediction = p.to_owned();
    }
    if let Some((id, _)) = by_id.into_iter().next() {
        return Err(EvalError::UnknownId(id.to_owned()));
    }
    Ok(items)
}

/// Offline scoring of a predictions file against a ground-truth file.
pub fn score_files(predictions: &Path, ground_truth: &Path, settings: &EvalSettings) -> Result<EvalReport> {
    let items = join_predictions(read_ground_truth(ground_truth)?, &read_predictions(predictions)?)?;
    score_items(&items, settings)
}
