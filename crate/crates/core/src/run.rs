//! Config-driven runs: data preparation, training, evaluation and the run
//! directory.
//!
//! ```text
//! config.toml            the config file exactly as supplied
//! effective-config.toml  config after command-line overrides
//! vocab.json
//! schedule.csv
//! metrics.jsonl          one step record per line
//! checkpoint.bin
//! eval.json              report over the held-out split
//! predictions.jsonl
//! ground-truth.jsonl
//! run.json               summary, written last
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_corpus, synth_corpus, Corpus, CorpusError, SynthCorpusConfig};
use crate::evalkit::{
    eval_items, holdout_images, score_items, to_jsonl, EvalError, EvalReport, EvalSettings, Prediction,
};
use crate::mixture::{build_schedule, MixtureSchedule, MixtureSpec, ScheduleConfig, ScheduleError};
use crate::model::{
    build_vocab, load_checkpoint, train, ModelConfig, ModelError, StepRecord, TrainHooks, TrainOptions, TrainState,
    Vocab,
};
use crate::nnkernel::AdamConfig;
use crate::tasksynth::{synth_dataset_over, NegativePolicy, SynthConfig, SynthError, TaskExample, TaskKind};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for bad input or configuration, 3 for failures during training.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Model(e) | RunError::Eval(EvalError::Model(e)) => match e {
                ModelError::NonFinite { .. } | ModelError::Kernel(_) | ModelError::Shape(_) | ModelError::Io(_) => 3,
                _ => 2,
            },
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic(SynthCorpusConfig),
    /// Directory written by `ingest` or `save_corpus`; relative paths resolve
    /// against the data root.
    Dir {
        path: PathBuf,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthCorpusConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training examples synthesized per mixture component.
    pub examples_per_task: usize,
    /// Fraction of images held out for evaluation.
    pub eval_fraction: f64,
    pub eval_tasks: Vec<TaskKind>,
    pub eval_examples_per_task: usize,
    pub eval_policy: NegativePolicy,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            examples_per_task: 2000,
            eval_fraction: 0.2,
            eval_tasks: TaskKind::OA.to_vec(),
            eval_examples_per_task: 100,
            eval_policy: NegativePolicy::Easy,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    /// Components as `kind` or `kind:policy`.
    pub tasks: Vec<String>,
    /// Sampling weights; equal when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { tasks: TaskKind::ALL.iter().map(|k| k.name().to_owned()).collect(), weights: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub batch_size: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { total_steps: 600, batch_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { checkpoint_every: 100, eval_batch_size: 32, log_every: 50 }
    }
}

/// Everything a run depends on. The global seed drives task synthesis,
/// the schedule, the held-out split and model initialization; a synthetic
/// corpus keeps its own seed so seeds of one experiment share data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub mixture: MixtureConfig,
    pub schedule: ScheduleSection,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            corpus: CorpusSource::Synthetic(SynthCorpusConfig { image_size: model.image_size, ..Default::default() }),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            mixture: MixtureConfig::default(),
            schedule: ScheduleSection::default(),
            model,
            optim: AdamConfig { lr: 2e-3, ..Default::default() },
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn components(&self) -> Result<Vec<Component>> {
        if self.mixture.tasks.is_empty() {
            return Err(RunError::Config("mixture.tasks is empty".into()));
        }
        self.mixture.tasks.iter().map(|t| Component::parse(t, self.synth.policy)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.components()?;
        if let Some(w) = &self.mixture.weights {
            if w.len() != self.mixture.tasks.len() {
                return Err(RunError::Config(format!("{} weights for {} tasks", w.len(), self.mixture.tasks.len())));
            }
        }
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(RunError::Config("data.eval_fraction must lie in [0, 1)".into()));
        }
        if self.data.examples_per_task == 0 {
            return Err(RunError::Config("data.examples_per_task must be positive".into()));
        }
        if let CorpusSource::Synthetic(c) = &self.corpus {
            if c.image_size != self.model.image_size {
                return Err(RunError::Config(format!(
                    "corpus image_size {} differs from model image_size {}",
                    c.image_size, self.model.image_size
                )));
            }
        }
        Ok(())
    }
}

/// One mixture component: a task kind and the negative policy used to
/// synthesize it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub name: String,
    pub kind: TaskKind,
    pub policy: NegativePolicy,
}

impl Component {
    pub fn parse(spec: &str, default_policy: NegativePolicy) -> Result<Self> {
        let (kind, policy) = match spec.split_once(':') {
            Some((k, p)) => (k.trim().parse::<TaskKind>()?, p.trim().parse::<NegativePolicy>()?),
            None => (spec.trim().parse::<TaskKind>()?, default_policy),
        };
        Ok(Component { name: spec.trim().to_owned(), kind, policy })
    }
}

/// Resolves a corpus path against `data_root` when relative.
pub fn resolve_data_path(path: &Path, data_root: Option<&Path>) -> PathBuf {
    match data_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

pub fn load_run_corpus(cfg: &RunConfig, data_root: Option<&Path>) -> Result<Corpus> {
    Ok(match &cfg.corpus {
        CorpusSource::Synthetic(c) => synth_corpus(c)?,
        CorpusSource::Dir { path } => load_corpus(&resolve_data_path(path, data_root))?,
    })
}

/// Datasets, vocabulary and schedule derived from a config and corpus.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub corpus: Corpus,
    pub corpus_fingerprint: String,
    pub components: Vec<Component>,
    pub datasets: Vec<Vec<TaskExample>>,
    pub eval: Vec<TaskExample>,
    pub vocab: Vocab,
    pub schedule: MixtureSchedule,
    pub model: ModelConfig,
}

impl PreparedRun {
    pub fn dataset_refs(&self) -> Vec<&[TaskExample]> {
        self.datasets.iter().map(Vec::as_slice).collect()
    }
}

pub fn prepare(cfg: &RunConfig, corpus: Corpus) -> Result<PreparedRun> {
    cfg.validate()?;
    let components = cfg.components()?;
    let held_out = holdout_images(corpus.image_ids(), cfg.data.eval_fraction, cfg.seed);
    let train_ids: Vec<&str> = corpus.image_ids().filter(|id| !held_out.contains(*id)).collect();
    let eval_ids: Vec<&str> = held_out.iter().map(String::as_str).collect();
    let synth_for = |policy| SynthConfig { seed: cfg.seed, policy, ..cfg.synth.clone() };

    let mut datasets = Vec::with_capacity(components.len());
    for c in &components {
        let out = synth_dataset_over(&corpus, &train_ids, &[c.kind], cfg.data.examples_per_task, &synth_for(c.policy))?;
        datasets.push(out.examples);
    }
    let eval = if eval_ids.is_empty() || cfg.data.eval_examples_per_task == 0 {
        Vec::new()
    } else {
        synth_dataset_over(
            &corpus,
            &eval_ids,
            &cfg.data.eval_tasks,
            cfg.data.eval_examples_per_task,
            &synth_for(cfg.data.eval_policy),
        )?
        .examples
    };

    let vocab = build_vocab(datasets.iter().flatten().chain(&eval), cfg.data.min_count)?;
    let model = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    model.validate()?;

    let spec = match &cfg.mixture.weights {
        Some(w) => MixtureSpec::new(components.iter().map(|c| c.name.clone()).zip(w.iter().copied()))?,
        None => MixtureSpec::equal(components.iter().map(|c| c.name.clone()))?,
    };
    let sizes: Vec<usize> = datasets.iter().map(Vec::len).collect();
    let schedule = build_schedule(
        &spec,
        &ScheduleConfig { total_steps: cfg.schedule.total_steps, batch_size: cfg.schedule.batch_size, seed: cfg.seed },
        &sizes,
    )?;
    Ok(PreparedRun {
        corpus_fingerprint: corpus.fingerprint(),
        corpus,
        components,
        datasets,
        eval,
        vocab,
        schedule,
        model,
    })
}

/// Appends step records to `metrics.jsonl` as they happen.
struct MetricsLog {
    file: fs::File,
    log_every: usize,
}

impl TrainHooks for MetricsLog {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState) -> crate::model::Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")?;
        if self.log_every > 0 && state.step % self.log_every == 0 {
            log::info!("step {} task {} loss {:.4}", state.step, record.task, record.loss);
        }
        Ok(())
    }
}

/// Keeps the first `n` lines of a metrics file.
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().take(n).collect::<std::io::Result<_>>()?;
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` in the run directory.
    pub resume: bool,
    /// Stop after this many steps without evaluating.
    pub stop_at: Option<usize>,
    /// Bytes to store as `config.toml`; the serialized config otherwise.
    pub config_text: Option<String>,
    pub data_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean loss over the final tenth of the schedule.
    pub final_loss: f64,
    pub tasks: Vec<String>,
    pub eval: BTreeMap<TaskKind, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<usize>,
    pub corpus_fingerprint: String,
    pub vocab_fingerprint: String,
    pub checkpoint_sha256: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "run.json";

/// Evaluates a trained state on the prepared held-out split.
pub fn evaluate_prepared(
    state: &TrainState,
    prep: &PreparedRun,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<crate::evalkit::EvalItem>)> {
    let items = eval_items(state, &prep.eval, &prep.corpus, &prep.vocab, cfg.train.eval_batch_size)?;
    let report = score_items(&items, &EvalSettings::default())?;
    Ok((report, items))
}

/// Writes the evaluation artifacts of a run directory.
pub fn write_eval(dir: &Path, report: &EvalReport, items: &[crate::evalkit::EvalItem]) -> Result<()> {
    fs::write(dir.join("eval.json"), report.to_json() + "\n")?;
    let preds: Vec<Prediction> =
        items.iter().map(|it| Prediction { id: it.id.clone(), prediction: it.prediction.clone() }).collect();
    fs::write(dir.join("predictions.jsonl"), to_jsonl(&preds))?;
    let gts: Vec<_> =
        items.iter().map(|it| crate::evalkit::EvalItem { prediction: String::new(), ..it.clone() }).collect();
    fs::write(dir.join("ground-truth.jsonl"), to_jsonl(&gts))?;
    Ok(())
}

/// Trains and evaluates one config into `dir`.
pub fn run(cfg: &RunConfig, dir: &Path, options: &RunOptions) -> Result<Option<RunSummary>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let corpus = load_run_corpus(cfg, options.data_root.as_deref())?;
    let prep = prepare(cfg, corpus)?;
    run_prepared(cfg, &prep, dir, options)
}

/// [`run`] on already prepared data. Returns `None` when stopped early.
pub fn run_prepared(
    cfg: &RunConfig,
    prep: &PreparedRun,
    dir: &Path,
    options: &RunOptions,
) -> Result<Option<RunSummary>> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let metrics = dir.join("metrics.jsonl");
    let mut state = if options.resume {
        let state = load_checkpoint(&ckpt)?;
        state.check_fingerprints(Some(&prep.corpus_fingerprint), &prep.vocab.fingerprint())?;
        if state.params.config != prep.model || state.seed != cfg.seed {
            return Err(RunError::Config("checkpoint was trained with a different model config or seed".into()));
        }
        truncate_lines(&metrics, state.step)?;
        log::info!("resuming at step {}", state.step);
        state
    } else {
        let text = options.config_text.clone().unwrap_or_else(|| cfg.to_toml());
        fs::write(dir.join("config.toml"), text)?;
        fs::write(dir.join("effective-config.toml"), cfg.to_toml())?;
        fs::write(dir.join("vocab.json"), serde_json::to_string(&prep.vocab).expect("vocab serializes") + "\n")?;
        fs::write(dir.join("schedule.csv"), prep.schedule.to_csv())?;
        fs::write(&metrics, "")?;
        let _ = fs::remove_file(dir.join(SUMMARY_FILE));
        TrainState::new(&prep.model, cfg.optim, cfg.seed, prep.corpus_fingerprint.clone(), prep.vocab.fingerprint())?
    };

    let mut hooks = MetricsLog {
        file: fs::OpenOptions::new().append(true).create(true).open(&metrics)?,
        log_every: cfg.train.log_every,
    };
    let train_opts = TrainOptions {
        stop_at: options.stop_at,
        checkpoint_path: Some(ckpt.clone()),
        checkpoint_every: Some(cfg.train.checkpoint_every),
    };
    train(&mut state, &prep.schedule, &prep.dataset_refs(), &prep.corpus, &prep.vocab, &train_opts, &mut hooks)?;
    if state.step < prep.schedule.len() {
        return Ok(None);
    }

    let (report, items) = evaluate_prepared(&state, prep, cfg)?;
    write_eval(dir, &report, &items)?;
    let losses: Vec<f64> = read_metrics(&metrics)?.into_iter().map(|r| r.loss).collect();
    let tail = (losses.len() / 10).max(1).min(losses.len());
    let final_loss = if tail == 0 { 0.0 } else { losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64 };
    let summary = RunSummary {
        status: "complete".into(),
        seed: cfg.seed,
        steps: state.step,
        final_loss,
        tasks: prep.components.iter().map(|c| c.name.clone()).collect(),
        eval: report.tasks.iter().map(|(k, t)| (*k, t.mean)).collect(),
        penalties: report.penalties,
        corpus_fingerprint: prep.corpus_fingerprint.clone(),
        vocab_fingerprint: prep.vocab.fingerprint(),
        checkpoint_sha256: hex::encode(Sha256::digest(fs::read(&ckpt)?)),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(Some(summary))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| RunError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let bytes = fs::read(dir.join(SUMMARY_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| RunError::Config(format!("{SUMMARY_FILE}: {e}")))
}
