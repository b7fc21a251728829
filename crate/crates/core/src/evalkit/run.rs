//! Greedy-decoding evaluation of a trained model.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use super::{score_items, EvalError, EvalItem, EvalReport, EvalSettings, Result};
use crate::corpus::{normalize_text, Corpus};
use crate::mixture::{make_batch, BatchLimits};
use crate::model::{generate, ModelError, TextInputs, TrainState, Vocab};
use crate::tasksynth::{TaskExample, TaskKind};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub settings: EvalSettings,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { settings: EvalSettings::default(), batch_size: 32 }
    }
}

/// Deterministic held-out image set: the `fraction` of images whose keyed
/// digest sorts first.
pub fn holdout_images<'a, I>(image_ids: I, fraction: f64, seed: u64) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut keyed: Vec<([u8; 32], &str)> = image_ids
        .into_iter()
        .map(|id| {
            let mut h = Sha256::new();
            h.update(b"holdout");
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().into(), id)
        })
        .collect();
    keyed.sort();
    let n = (fraction.clamp(0.0, 1.0) * keyed.len() as f64).round() as usize;
    keyed[..n].iter().map(|(_, id)| (*id).to_owned()).collect()
}

fn item_id(kind: TaskKind, index: usize) -> String {
    format!("{}-{index:05}", kind.name())
}

/// Ground-truth items for `examples`, predictions left empty. Caption items
/// take every caption of their image as references; list items carry the
/// image's unlabeled objects.
pub fn ground_truth_items(examples: &[TaskExample], corpus: &Corpus) -> Vec<EvalItem> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut ground_truths = vec![ex.target.clone()];
            if ex.kind == TaskKind::Caption {
                let refs: Vec<String> = corpus
                    .captions(&ex.image_id)
                    .iter()
                    .map(|c| normalize_text(&c.caption))
                    .filter(|c| !c.is_empty())
                    .collect();
                if !refs.is_empty() {
                    ground_truths = refs;
                }
            }
            let hidden_objects = match (ex.kind, corpus.hidden_positives(&ex.image_id)) {
                (TaskKind::OaList, Some(hidden)) => {
                    hidden.iter().map(|c| normalize_text(corpus.display_name(c))).collect()
                }
                _ => Vec::new(),
            };
            EvalItem {
                id: item_id(ex.kind, i),
                kind: ex.kind,
                image_id: ex.image_id.clone(),
                prediction: String::new(),
                ground_truths,
                hidden_objects,
            }
        })
        .collect()
}

/// Greedy predictions for every example, in order.
pub fn predict(
    state: &TrainState,
    examples: &[TaskExample],
    corpus: &Corpus,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<String>> {
    if batch_size == 0 {
        return Err(EvalError::Config("batch size must be positive".into()));
    }
    let cfg = &state.params.config;
    let limits = BatchLimits { max_prompt: cfg.max_prompt_len, max_target: cfg.max_target_len };
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&TaskExample> = chunk.iter().collect();
        let batch = make_batch(&refs, corpus, vocab, limits).map_err(ModelError::from)?;
        let text = TextInputs {
            batch: chunk.len(),
            prompt_ids: &batch.prompt_ids,
            prompt_mask: &batch.prompt_mask,
            prompt_len: batch.prompt_len,
        };
        for seq in generate(&state.params, &batch.images, &text, cfg.max_target_len)? {
            out.push(vocab.decode(&seq));
        }
    }
    Ok(out)
}

/// Ground-truth items with the model's predictions filled in.
pub fn eval_items(
    state: &TrainState,
    examples: &[TaskExample],
    corpus: &Corpus,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<EvalItem>> {
    state.check_fingerprints(Some(&corpus.fingerprint()), &vocab.fingerprint())?;
    let predictions = predict(state, examples, corpus, vocab, batch_size)?;
    let mut items = ground_truth_items(examples, corpus);
    for (it, p) in items.iter_mut().zip(predictions) {
        it.prediction = p;
    }
    Ok(items)
}

/// Generates an answer for every example and scores it.
pub fn evaluate(
    state: &TrainState,
    examples: &[TaskExample],
    corpus: &Corpus,
    vocab: &Vocab,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let items = eval_items(state, examples, corpus, vocab, options.batch_size)?;
    score_items(&items, &options.settings)
}
