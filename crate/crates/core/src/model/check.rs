//! Gradient check of the full model at toy width.

use super::net::{forward, ModelConfig, ModelParams};
use super::vocab::build_vocab;
use super::{ModelError, Result};
use crate::corpus::{synth_corpus, SynthCorpusConfig};
use crate::mixture::{make_batch, BatchLimits};
use crate::nnkernel::gradcheck::{check_gradients, GradCheckReport};
use crate::nnkernel::KernelError;
use crate::tasksynth::{synth_dataset, SynthConfig, TaskExample, TaskKind};

/// Width-8 model on a two-example batch of synthetic data, in f64.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let corpus = synth_corpus(&SynthCorpusConfig { n_images: 6, image_size: 8, seed, ..Default::default() })
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let synth = SynthConfig { seed, ..Default::default() };
    let out = synth_dataset(&corpus, &[TaskKind::Caption, TaskKind::OaExists], 2, &synth)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let vocab = build_vocab(&out.examples, 1)?;
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        d_ff: 16,
        patch_size: 4,
        image_size: 8,
        max_prompt_len: 16,
        max_target_len: 12,
        vocab_size: vocab.len(),
        init_scale: 0.02,
    };
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let exs: Vec<&TaskExample> = vec![&out.examples[0], &out.examples[3]];
    let limits = BatchLimits { max_prompt: cfg.max_prompt_len, max_target: cfg.max_target_len };
    let batch = make_batch(&exs, &corpus, &vocab, limits)?;
    let mut store = params.store.clone();
    let report = check_gradients(&mut store, 1e-5, |tape, s| {
        let mut p = params.clone();
        p.store = s.clone();
        forward(tape, &p, &batch).map(|o| o.loss).map_err(|e| KernelError::InvalidArgument(e.to_string()))
    })?;
    Ok(report)
}
