//! Compiles a [`Corpus`](crate::corpus::Corpus) into cross-modal and
//! object-aware text tasks.
//!
//! Every generator is a pure function of its inputs and the RNG it is
//! handed; [`synth_dataset`] keys one RNG per example so output does not
//! depend on generation order.

mod cm;
mod dataset;
mod oa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ObjectSource;

pub use cm::{
    make_hard_negative_caption, synth_caption, synth_completion, synth_itm, synth_mlm, HardNegative, CAPTION_PROMPT,
    COMPLETION_PREFIX, ITM_PREFIX,
};
pub use dataset::{
    example_rng, read_jsonl, synth_dataset, synth_dataset_over, task_file_name, write_task_files, SynthManifest,
    SynthOutput,
};
pub use oa::{synth_oa_andor, synth_oa_exists, synth_oa_list, synth_oa_which, LIST_PROMPT};

pub const MAX_SENTINELS: usize = 16;

pub fn sentinel(k: usize) -> String {
    format!("<extra_{k}>")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("caption contains no lexicon noun with relatives")]
    NoNounFound,
    #[error("{policy} negatives unavailable for {kind} on image {image_id}")]
    PolicyUnavailable { kind: TaskKind, policy: NegativePolicy, image_id: String },
    #[error("no eligible images for task {0}")]
    Synthesis(TaskKind),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    Completion,
    Itm,
    Mlm,
    OaList,
    OaExists,
    #[serde(rename = "oa_andor")]
    OaAndOr,
    OaWhich,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Caption,
        TaskKind::Completion,
        TaskKind::Itm,
        TaskKind::Mlm,
        TaskKind::OaList,
        TaskKind::OaExists,
        TaskKind::OaAndOr,
        TaskKind::OaWhich,
    ];
    pub const CM: [TaskKind; 4] = [TaskKind::Caption, TaskKind::Completion, TaskKind::Itm, TaskKind::Mlm];
    pub const OA: [TaskKind; 4] = [TaskKind::OaList, TaskKind::OaExists, TaskKind::OaAndOr, TaskKind::OaWhich];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::Completion => "completion",
            TaskKind::Itm => "itm",
            TaskKind::Mlm => "mlm",
            TaskKind::OaList => "oa_list",
            TaskKind::OaExists => "oa_exists",
            TaskKind::OaAndOr => "oa_andor",
            TaskKind::OaWhich => "oa_which",
        }
    }

    pub fn is_cross_modal(self) -> bool {
        TaskKind::CM.contains(&self)
    }

    /// Whether the negative policy changes what this task generates.
    pub fn uses_negatives(self) -> bool {
        matches!(self, TaskKind::Itm | TaskKind::OaExists | TaskKind::OaAndOr | TaskKind::OaWhich)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SynthError::Config(format!("unknown task kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePolicy {
    #[default]
    Easy,
    Hard,
}

impl NegativePolicy {
    pub fn name(self) -> &'static str {
        match self {
            NegativePolicy::Easy => "easy",
            NegativePolicy::Hard => "hard",
        }
    }
}

impl fmt::Display for NegativePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NegativePolicy {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(NegativePolicy::Easy),
            "hard" => Ok(NegativePolicy::Hard),
            _ => Err(SynthError::Config(format!("unknown negative policy `{s}`"))),
        }
    }
}

/// Provenance recorded alongside each example.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    /// Policy that actually produced the distractor, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub policy: Option<NegativePolicy>,
    /// Hard was requested but the example fell back to Easy.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub replaced_noun: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub replacement: Option<String>,
    /// Object display names in prompt order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub candidate_objects: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub connective: Option<String>,
    /// Image whose caption was borrowed for an easy ITM negative.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_image: Option<String>,
    /// Untouched caption, for ITM examples.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_caption: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub image_id: String,
    pub kind: TaskKind,
    pub prompt: String,
    pub target: String,
    pub meta: TaskMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub mlm_mask_rate: f64,
    pub mlm_mean_span: f64,
    pub completion_split: (f64, f64),
    pub andor_k: Vec<usize>,
    pub yes_no_balance: f64,
    pub policy: NegativePolicy,
    pub object_source: ObjectSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            mlm_mask_rate: 0.15,
            mlm_mean_span: 3.0,
            completion_split: (0.25, 0.75),
            andor_k: vec![2, 3],
            yes_no_balance: 0.5,
            policy: NegativePolicy::Easy,
            object_source: ObjectSource::Union,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.mlm_mask_rate) {
            return Err(SynthError::Config("mlm_mask_rate must lie in (0, 1)".into()));
        }
        if !open_unit(self.yes_no_balance) {
            return Err(SynthError::Config("yes_no_balance must lie in (0, 1)".into()));
        }
        let (lo, hi) = self.completion_split;
        if !(open_unit(lo) && open_unit(hi) && lo <= hi) {
            return Err(SynthError::Config("completion_split must be an ordered range inside (0, 1)".into()));
        }
        if self.mlm_mean_span < 1.0 {
            return Err(SynthError::Config("mlm_mean_span must be at least 1".into()));
        }
        if self.andor_k.is_empty() || self.andor_k.iter().any(|k| !(2..=3).contains(k)) {
            return Err(SynthError::Config("andor_k must be a non-empty subset of {2, 3}".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
