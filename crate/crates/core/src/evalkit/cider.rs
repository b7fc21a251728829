//! Consensus caption metric over TF-IDF weighted n-gram vectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderConfig {
    pub n_max: usize,
    pub sigma: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig { n_max: 4, sigma: 6.0 }
    }
}

type Gram = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Gram, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Tokens as the metric sees them.
pub fn cider_tokens(text: &str) -> Vec<String> {
    tokenize(text)
}

/// Scorer with a document-frequency table fixed at construction.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    config: CiderConfig,
    docs: usize,
    df: BTreeMap<Gram, usize>,
}

struct Vector {
    weights: BTreeMap<Gram, f64>,
    norm: f64,
}

impl CiderScorer {
    /// Builds document frequencies over `reference_sets`, one document per
    /// set.
    pub fn new<S: AsRef<str>>(reference_sets: &[Vec<S>], config: CiderConfig) -> Self {
        let mut df: BTreeMap<Gram, usize> = BTreeMap::new();
        for set in reference_sets {
            let mut seen: BTreeSet<Gram> = BTreeSet::new();
            for r in set {
                let toks = cider_tokens(r.as_ref());
                for n in 1..=config.n_max {
                    seen.extend(ngrams(&toks, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        CiderScorer { config, docs: reference_sets.len(), df }
    }

    pub fn config(&self) -> CiderConfig {
        self.config
    }

    pub fn num_documents(&self) -> usize {
        self.docs
    }

    fn idf(&self, g: &Gram) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0).max(1);
        (self.docs as f64 / df as f64).ln()
    }

    fn vector(&self, tokens: &[String], n: usize) -> Vector {
        let counts = ngrams(tokens, n);
        let total: f64 = counts.values().sum();
        let weights: BTreeMap<Gram, f64> = counts
            .into_iter()
            .map(|(g, c)| {
                let w = c / total * self.idf(&g);
                (g, w)
            })
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        Vector { weights, norm }
    }

    /// Score of one candidate against its references, in `[0, 10]`.
    pub fn score<S: AsRef<str>>(&self, candidate: &str, references: &[S]) -> f64 {
        let cand = cider_tokens(candidate);
        if cand.is_empty() {
            log::warn!("empty candidate scores 0");
            return 0.0;
        }
        if references.is_empty() {
            return 0.0;
        }
        let refs: Vec<Vec<String>> = references.iter().map(|r| cider_tokens(r.as_ref())).collect();
        let mut total = 0.0;
        for n in 1..=self.config.n_max {
            let vc = self.vector(&cand, n);
            let mut per_n = 0.0;
            for r in &refs {
                let vr = self.vector(r, n);
                if vc.norm == 0.0 || vr.norm == 0.0 {
                    continue;
                }
                let dot: f64 = vc.weights.iter().filter_map(|(g, w)| vr.weights.get(g).map(|x| w * x)).sum();
                let delta = cand.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * self.config.sigma.powi(2))).exp();
                per_n += dot / (vc.norm * vr.norm) * penalty;
            }
            total += per_n / refs.len() as f64;
        }
        (total / self.config.n_max as f64 * 10.0).clamp(0.0, 10.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderResult {
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Scores every candidate against its reference set, with document
/// frequencies taken over all the sets.
pub fn cider<S: AsRef<str>>(candidates: &[S], reference_sets: &[Vec<S>], config: CiderConfig) -> CiderResult {
    assert_eq!(candidates.len(), reference_sets.len(), "one reference set per candidate");
    let scorer = CiderScorer::new(reference_sets, config);
    let scores: Vec<f64> =
        candidates.iter().zip(reference_sets).map(|(c, refs)| scorer.score(c.as_ref(), refs)).collect();
    let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    CiderResult { scores, mean }
}
