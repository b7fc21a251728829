use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::net::{forward, ModelConfig, ModelParams};
use super::vocab::Vocab;
use super::{ModelError, Result};
use crate::corpus::Corpus;
use crate::mixture::{make_batch, BatchLimits, MixtureSchedule};
use crate::nnkernel::{Adam, AdamConfig, KernelError, Tape};
use crate::tasksynth::TaskExample;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: Adam<f32>,
    /// Schedule entries already executed.
    pub step: usize,
    pub seed: u64,
    /// Reserved for stochastic extensions; captured so resumes stay exact.
    pub rng: ChaCha8Rng,
    pub corpus_fingerprint: String,
    pub vocab_fingerprint: String,
}

impl TrainState {
    pub fn new(
        config: &ModelConfig,
        adam: AdamConfig,
        seed: u64,
        corpus_fingerprint: impl Into<String>,
        vocab_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let params = ModelParams::init(config, seed)?;
        let adam = Adam::new(adam, &params.store);
        Ok(TrainState {
            params,
            adam,
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64),
            corpus_fingerprint: corpus_fingerprint.into(),
            vocab_fingerprint: vocab_fingerprint.into(),
        })
    }

    /// Errors unless the state was trained against the given data.
    pub fn check_fingerprints(&self, corpus: Option<&str>, vocab: &str) -> Result<()> {
        if self.vocab_fingerprint != vocab {
            return Err(ModelError::Fingerprint {
                what: "vocabulary",
                stored: self.vocab_fingerprint.clone(),
                actual: vocab.to_owned(),
            });
        }
        if let Some(c) = corpus {
            if self.corpus_fingerprint != c {
                return Err(ModelError::Fingerprint {
                    what: "corpus",
                    stored: self.corpus_fingerprint.clone(),
                    actual: c.to_owned(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many schedule entries instead of running to the end.
    pub stop_at: Option<usize>,
    /// Written every `checkpoint_every` steps and once at the end.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

pub trait TrainHooks {
    fn on_step(&mut self, _record: &StepRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

impl<F: FnMut(&StepRecord, &TrainState)> TrainHooks for F {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState) -> Result<()> {
        self(record, state);
        Ok(())
    }
}

/// Executes schedule entries from `state.step` onward. `datasets[c]` holds
/// the examples of schedule component `c`.
pub fn train<H: TrainHooks + ?Sized>(
    state: &mut TrainState,
    schedule: &MixtureSchedule,
    datasets: &[&[TaskExample]],
    corpus: &Corpus,
    vocab: &Vocab,
    options: &TrainOptions,
    hooks: &mut H,
) -> Result<Vec<StepRecord>> {
    if datasets.len() != schedule.components.len() {
        return Err(ModelError::Config(format!(
            "{} datasets for {} schedule components",
            datasets.len(),
            schedule.components.len()
        )));
    }
    for e in &schedule.entries {
        if let Some(&bad) = e.ids.iter().find(|&&i| i >= datasets[e.component].len()) {
            return Err(ModelError::Config(format!(
                "step {} references example {bad} of `{}`, which has {}",
                e.step,
                schedule.components[e.component],
                datasets[e.component].len()
            )));
        }
    }
    let cfg = state.params.config.clone();
    if vocab.len() != cfg.vocab_size {
        return Err(ModelError::Config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    state.check_fingerprints(None, &vocab.fingerprint())?;
    let limits = BatchLimits { max_prompt: cfg.max_prompt_len, max_target: cfg.max_target_len };
    let end = options.stop_at.unwrap_or(schedule.len()).min(schedule.len());
    let mut history = Vec::with_capacity(end.saturating_sub(state.step));

    while state.step < end {
        let entry = &schedule.entries[state.step];
        let task = schedule.components[entry.component].clone();
        let examples: Vec<&TaskExample> = entry.ids.iter().map(|&i| &datasets[entry.component][i]).collect();
        let batch = make_batch(&examples, corpus, vocab, limits)?;
        let non_finite = |what: String| ModelError::NonFinite { step: entry.step, task: task.clone(), what };

        state.params.store.zero_grad();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &state.params, &batch)?;
        let loss = tape.value(out.loss).item() as f64;
        if !loss.is_finite() {
            return Err(non_finite("loss".into()));
        }
        tape.backward(out.loss, &mut state.params.store)?;
        drop(tape);
        match state.adam.step(&mut state.params.store) {
            Err(KernelError::NonFinite { param }) => return Err(non_finite(format!("gradient in `{param}`"))),
            other => other?,
        }
        state.step += 1;

        let record = StepRecord { step: entry.step, task, loss };
        hooks.on_step(&record, state)?;
        history.push(record);
        if let (Some(path), Some(every)) = (&options.checkpoint_path, options.checkpoint_every) {
            if every > 0 && state.step % every == 0 && state.step < end {
                save_checkpoint(state, path)?;
            }
        }
    }
    if let Some(path) = &options.checkpoint_path {
        save_checkpoint(state, path)?;
    }
    Ok(history)
}
