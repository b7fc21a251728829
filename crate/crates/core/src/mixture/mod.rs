//! Task mixtures: which dataset each training step draws from, and how a
//! step's examples become padded token batches.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::model::vocab::{Vocab, EOS, PAD};
use crate::nnkernel::Tensor;
use crate::tasksynth::TaskExample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("component `{0}` has a non-positive or non-finite weight")]
    BadWeight(String),
    #[error("component `{0}` has an empty dataset")]
    EmptyComponent(String),
    #[error("{0}")]
    Config(String),
    #[error("cannot build a batch: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new<S: Into<String>>(components: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let components: Vec<MixtureComponent> =
            components.into_iter().map(|(name, weight)| MixtureComponent { name: name.into(), weight }).collect();
        if components.is_empty() {
            return Err(ScheduleError::NoComponents);
        }
        for c in &components {
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(ScheduleError::BadWeight(c.name.clone()));
            }
        }
        for (i, c) in components.iter().enumerate() {
            if components[..i].iter().any(|o| o.name == c.name) {
                return Err(ScheduleError::Config(format!("duplicate component `{}`", c.name)));
            }
        }
        Ok(MixtureSpec { components })
    }

    /// Every component weighted 1.
    pub fn equal<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        MixtureSpec::new(names.into_iter().map(|n| (n, 1.0)))
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.components.iter().map(|c| c.name.as_str())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        self.components.iter().map(|c| c.weight / total).collect()
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.components.iter().map(|c| c.weight)).expect("weights validated at construction")
    }
}

/// Index `i` with probability `weight_i / Σ weights`.
pub fn sample_component<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> usize {
    spec.sampler().sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { total_steps: 1000, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub step: usize,
    pub component: usize,
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSchedule {
    pub components: Vec<String>,
    pub entries: Vec<ScheduleEntry>,
}

impl MixtureSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Steps assigned to each component.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.components.len()];
        for e in &self.entries {
            c[e.component] += 1;
        }
        c
    }

    /// `step,component,ids...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            write!(out, "{},{}", e.step, self.components[e.component]).unwrap();
            for id in &e.ids {
                write!(out, ",{id}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn keyed_rng(seed: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"mixture");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Hands out example ids in shuffled passes, reshuffling on exhaustion.
struct EpochShuffler {
    seed: u64,
    component: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochShuffler {
    fn new(seed: u64, component: usize, size: usize) -> Self {
        let mut s = EpochShuffler { seed, component: component as u64, epoch: 0, order: (0..size).collect(), pos: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = keyed_rng(self.seed, "epoch", self.component, self.epoch);
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One batch-sized draw per step: a component by weight, then the next ids
/// from that component's shuffled epochs.
pub fn build_schedule(spec: &MixtureSpec, cfg: &ScheduleConfig, sizes: &[usize]) -> Result<MixtureSchedule> {
    if sizes.len() != spec.len() {
        return Err(ScheduleError::Config(format!("{} dataset sizes for {} components", sizes.len(), spec.len())));
    }
    if cfg.total_steps == 0 || cfg.batch_size == 0 {
        return Err(ScheduleError::Config("total_steps and batch_size must be positive".into()));
    }
    for (c, &n) in spec.components.iter().zip(sizes) {
        if n == 0 {
            return Err(ScheduleError::EmptyComponent(c.name.clone()));
        }
    }
    let sampler = spec.sampler();
    let mut rng = keyed_rng(cfg.seed, "components", 0, 0);
    let mut shufflers: Vec<EpochShuffler> =
        sizes.iter().enumerate().map(|(i, &n)| EpochShuffler::new(cfg.seed, i, n)).collect();
    let entries = (0..cfg.total_steps)
        .map(|step| {
            let component = sampler.sample(&mut rng);
            let sh = &mut shufflers[component];
            ScheduleEntry { step, component, ids: (0..cfg.batch_size).map(|_| sh.next()).collect() }
        })
        .collect();
    Ok(MixtureSchedule { components: spec.names().map(str::to_owned).collect(), entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLimits {
    pub max_prompt: usize,
    pub max_target: usize,
}

/// Right-padded token batch. Token arrays are row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, H, W, 3]`
    pub images: Tensor<f32>,
    pub prompt_ids: Vec<u32>,
    pub prompt_mask: Vec<bool>,
    pub prompt_len: usize,
    /// Targets followed by end-of-sequence, then padding.
    pub target_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub target_len: usize,
    /// Sequences cut to fit the limits.
    pub truncated: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn prompt_row(&self, i: usize) -> &[u32] {
        &self.prompt_ids[i * self.prompt_len..(i + 1) * self.prompt_len]
    }

    pub fn target_row(&self, i: usize) -> &[u32] {
        &self.target_ids[i * self.target_len..(i + 1) * self.target_len]
    }
}

/// Encodes, truncates and pads a group of examples with their images.
pub fn make_batch(examples: &[&TaskExample], corpus: &Corpus, vocab: &Vocab, limits: BatchLimits) -> Result<Batch> {
    if examples.is_empty() {
        return Err(ScheduleError::Batch("no examples".into()));
    }
    if limits.max_prompt == 0 || limits.max_target == 0 {
        return Err(ScheduleError::Batch("length limits must be positive".into()));
    }
    let mut truncated = 0;
    let mut prompts = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    let mut pixels = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for ex in examples {
        let img = corpus
            .image(&ex.image_id)
            .ok_or_else(|| ScheduleError::Batch(format!("no pixels for image {}", ex.image_id)))?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(ScheduleError::Batch(format!(
                    "image {} is {}x{}, batch expects {}x{}",
                    ex.image_id, img.height, img.width, d.0, d.1
                )))
            }
            Some(_) => {}
        }
        pixels.extend_from_slice(&img.pixels);

        let mut p = vocab.encode(&ex.prompt);
        if p.len() > limits.max_prompt {
            p.truncate(limits.max_prompt);
            truncated += 1;
        }
        if p.is_empty() {
            p.push(PAD);
        }
        let mut t = vocab.encode(&ex.target);
        if t.len() + 1 > limits.max_target {
            t.truncate(limits.max_target - 1);
            truncated += 1;
        }
        t.push(EOS);
        prompts.push(p);
        targets.push(t);
    }
    if truncated > 0 {
        log::warn!("truncated {truncated} sequence(s) to fit batch limits");
    }

    let pad = |seqs: &[Vec<u32>]| {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        (ids, mask, len)
    };
    let (prompt_ids, prompt_mask, prompt_len) = pad(&prompts);
    let (target_ids, loss_mask, target_len) = pad(&targets);
    let (h, w) = dims.expect("at least one example");
    let images = Tensor::new(&[examples.len(), h, w, 3], pixels).map_err(|e| ScheduleError::Batch(e.to_string()))?;
    Ok(Batch { images, prompt_ids, prompt_mask, prompt_len, target_ids, loss_mask, target_len, truncated })
}
