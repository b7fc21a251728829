//! Command-line front end: ingest, synthesize, train, evaluate, score,
//! check gradients and run ablation grids.

pub mod ablate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mixpretrain::corpus::{
    build_corpus, build_lexicon, parse_box_labels, parse_class_descriptions, parse_image_labels,
    parse_localized_narratives, read_pixel_file, save_corpus, synth_corpus, Corpus, CorpusError, Lexicon,
};
use mixpretrain::evalkit::{score_files, EvalSettings, Metric};
use mixpretrain::model::{load_checkpoint, model_gradcheck};
use mixpretrain::nnkernel::gradcheck::op_suite;
use mixpretrain::run::{
    self, evaluate_prepared, load_run_corpus, prepare, write_eval, Component, CorpusSource, RunConfig, RunError,
    RunOptions, CHECKPOINT_FILE,
};
use mixpretrain::tasksynth::{synth_dataset, write_task_files, SynthConfig};

pub const ENV_DATA: &str = "MIXPRETRAIN_DATA";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mixpretrain", version, about = "Task-mixture pre-training workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel child processes for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default data root for relative corpus paths and default outputs.
    #[arg(long, global = true, env = ENV_DATA)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Validate annotation files and write a corpus directory.
    Ingest(IngestArgs),
    /// Synthesize task JSONL files from a corpus.
    Synth(SynthArgs),
    /// Train per the config into a run directory.
    Train(TrainArgs),
    /// Re-evaluate a run directory's checkpoint.
    Eval(EvalArgs),
    /// Score a predictions file against ground truth.
    Score(ScoreArgs),
    /// Central-difference check of every op and the width-8 model.
    Gradcheck(GradcheckArgs),
    /// Run an ablation grid and aggregate a comparison table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Class descriptions CSV (`class_id,display_name`).
    #[arg(long, required_unless_present = "synthetic")]
    pub classes: Option<PathBuf>,
    /// Image-level labels CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Box annotations CSV.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Narrative captions JSONL.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Noun lexicon TSV; the bundled one when absent.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Pixel file in the corpus directory format.
    #[arg(long)]
    pub pixels: Option<PathBuf>,
    /// Write the config's synthetic corpus instead of parsing files.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus directory; the config's corpus source when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated `kind` or `kind:policy`; the config mixture when absent.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    /// Examples per task; the config's `data.examples_per_task` when absent.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_at: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to evaluate instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Score every item with one metric instead of the per-task default.
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `paper-table1`, `paper-table2` or a grid TOML file.
    #[arg(long)]
    pub grid: String,
    /// Comma-separated seeds; the grid's, or three from the global seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Only rebuild the table from existing run directories.
    #[arg(long)]
    pub aggregate_only: bool,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "exact_match" | "exact-match" => Ok(Metric::ExactMatch),
        "cider" => Ok(Metric::Cider),
        _ => Err(format!("unknown metric `{s}` (exact_match or cider)")),
    }
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 3, error: error.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure { code: e.exit_code(), error: e.into() }
    }
}

type Outcome = Result<(), Failure>;

fn data_path(global: &Global, name: &str) -> PathBuf {
    global.data.clone().unwrap_or_else(|| PathBuf::from(".")).join(name)
}

fn load_config(global: &Global) -> Result<(RunConfig, Option<String>), Failure> {
    let (mut cfg, text) = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::input)?;
            (RunConfig::from_toml(&text).map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok((cfg, text))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

pub fn execute(cli: Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Cmd::Ingest(a) => ingest(g, a),
        Cmd::Synth(a) => synth(g, a),
        Cmd::Train(a) => train(g, a),
        Cmd::Eval(a) => eval(g, a),
        Cmd::Score(a) => score(g, a),
        Cmd::Gradcheck(a) => gradcheck(g, a),
        Cmd::Ablate(a) => ablate(g, a),
    }
}

fn with_file<T>(path: &Path, r: Result<T, CorpusError>) -> Result<T, Failure> {
    r.map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<fs::File, Failure> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(Failure::input)
}

fn ingest(g: &Global, a: &IngestArgs) -> Outcome {
    let out = g.out.clone().unwrap_or_else(|| data_path(g, "corpus"));
    let corpus: Corpus = if a.synthetic {
        let (cfg, _) = load_config(g)?;
        let CorpusSource::Synthetic(mut sc) = cfg.corpus else {
            return Err(Failure::input(anyhow!("config corpus source is not synthetic")));
        };
        if let Some(seed) = g.seed {
            sc.seed = seed;
        }
        synth_corpus(&sc).map_err(Failure::input)?
    } else {
        let classes_path = a.classes.as_ref().expect("required by clap");
        let classes = with_file(classes_path, parse_class_descriptions(open(classes_path)?))?;
        let labels = match &a.labels {
            Some(p) => with_file(p, parse_image_labels(open(p)?))?,
            None => Vec::new(),
        };
        let boxes = match &a.boxes {
            Some(p) => with_file(p, parse_box_labels(open(p)?))?,
            None => Vec::new(),
        };
        let captions = match &a.captions {
            Some(p) => with_file(p, parse_localized_narratives(open(p)?))?,
            None => Vec::new(),
        };
        let lexicon = match &a.lexicon {
            Some(p) => with_file(p, build_lexicon(open(p)?))?,
            None => Lexicon::bundled(),
        };
        let images = match &a.pixels {
            Some(p) => with_file(p, read_pixel_file(p))?,
            None => Vec::new(),
        };
        if labels.is_empty() && boxes.is_empty() && captions.is_empty() {
            return Err(Failure::input(anyhow!("no annotations given: pass --labels, --boxes or --captions")));
        }
        let corpus = build_corpus(classes, labels, boxes, captions, images).map_err(Failure::input)?;
        corpus.with_lexicon(lexicon).map_err(Failure::input)?
    };
    let manifest = save_corpus(&corpus, &out).map_err(Failure::input)?;
    log::info!("wrote corpus to {}", out.display());
    print_json(&manifest);
    Ok(())
}

fn synth(g: &Global, a: &SynthArgs) -> Outcome {
    let (cfg, _) = load_config(g)?;
    let corpus = match &a.corpus {
        Some(dir) => with_file(dir, mixpretrain::corpus::load_corpus(dir))?,
        None if g.config.is_none() => {
            let dir = data_path(g, "corpus");
            with_file(&dir, mixpretrain::corpus::load_corpus(&dir))?
        }
        None => load_run_corpus(&cfg, g.data.as_deref())?,
    };
    let specs = if a.tasks.is_empty() { cfg.mixture.tasks.clone() } else { a.tasks.clone() };
    let count = a.count.unwrap_or(cfg.data.examples_per_task);
    let out = g.out.clone().unwrap_or_else(|| data_path(g, "tasks"));

    let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for s in &specs {
        let c = Component::parse(s, cfg.synth.policy).map_err(Failure::input)?;
        let kinds = groups.entry(c.policy).or_default();
        if !kinds.contains(&c.kind) {
            kinds.push(c.kind);
        }
    }
    let mut manifests = Vec::new();
    let mut files = Vec::new();
    for (policy, kinds) in groups {
        let sc = SynthConfig { seed: cfg.seed, policy, ..cfg.synth.clone() };
        let output = synth_dataset(&corpus, &kinds, count, &sc).map_err(Failure::input)?;
        let written = write_task_files(&out, &output).map_err(Failure::input)?;
        files.extend(written.into_iter().filter(|p| !p.ends_with("synth_manifest.json")));
        manifests.push(output.manifest);
    }
    let json = serde_json::to_string_pretty(&manifests).expect("manifest serializes");
    fs::write(out.join("synth_manifest.json"), json + "\n").map_err(Failure::input)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn train(g: &Global, a: &TrainArgs) -> Outcome {
    let (cfg, text) = load_config(g)?;
    let out = g.out.clone().unwrap_or_else(|| data_path(g, "run"));
    let opts = RunOptions { resume: a.resume, stop_at: a.stop_at, config_text: text, data_root: g.data.clone() };
    match run::run(&cfg, &out, &opts)? {
        Some(summary) => print_json(&summary),
        None => log::info!("stopped early; resume with --resume"),
    }
    Ok(())
}

fn eval(g: &Global, a: &EvalArgs) -> Outcome {
    let cfg_path = a.run.join("effective-config.toml");
    let text = fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))
        .map_err(Failure::input)?;
    let cfg = RunConfig::from_toml(&text)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join(CHECKPOINT_FILE));
    let state = load_checkpoint(&ckpt).map_err(|e| Failure::input(anyhow!("{}: {e}", ckpt.display())))?;
    let corpus = load_run_corpus(&cfg, g.data.as_deref())?;
    let prep = prepare(&cfg, corpus)?;
    let (report, items) = evaluate_prepared(&state, &prep, &cfg)?;
    let out = g.out.clone().unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out).map_err(Failure::input)?;
    write_eval(&out, &report, &items)?;
    let means: BTreeMap<_, _> = report.tasks.iter().map(|(k, t)| (k.name(), t.mean)).collect();
    print_json(&means);
    Ok(())
}

fn score(g: &Global, a: &ScoreArgs) -> Outcome {
    let settings = EvalSettings { metric: a.metric, ..Default::default() };
    let report = score_files(&a.predictions, &a.ground_truth, &settings).map_err(Failure::input)?;
    match &g.out {
        Some(p) => fs::write(p, report.to_json() + "\n").map_err(Failure::input)?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn gradcheck(g: &Global, a: &GradcheckArgs) -> Outcome {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in 0..a.seeds {
        for c in op_suite(seed).map_err(Failure::runtime)? {
            rows.push((c.op.to_owned(), seed, c.max_rel_err));
        }
        let m = model_gradcheck(seed).map_err(Failure::runtime)?;
        rows.push(("model".to_owned(), seed, m.max_rel_err));
    }
    for (op, seed, err) in &rows {
        let verdict = if *err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{op:<22} seed {seed}  max rel err {err:.3e}  {verdict}");
        worst = worst.max(*err);
    }
    if let Some(p) = &g.out {
        let json: Vec<_> = rows
            .iter()
            .map(|(op, seed, err)| serde_json::json!({"op": op, "seed": seed, "max_rel_err": err}))
            .collect();
        fs::write(p, serde_json::to_string_pretty(&json).expect("serializes") + "\n").map_err(Failure::input)?;
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::runtime(anyhow!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

fn ablate(g: &Global, a: &AblateArgs) -> Outcome {
    let (mut base, _) = load_config(g)?;
    if let CorpusSource::Dir { path } = &mut base.corpus {
        let resolved = run::resolve_data_path(path, g.data.as_deref());
        *path = std::path::absolute(&resolved).unwrap_or(resolved);
    }
    let grid = ablate::load_grid(&a.grid).map_err(Failure::input)?;
    let seeds = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else if !grid.seeds.is_empty() {
        grid.seeds.clone()
    } else {
        (base.seed..base.seed + 3).collect()
    };
    let out = g.out.clone().unwrap_or_else(|| data_path(g, &format!("ablation-{}", grid.name)));
    let jobs = ablate::plan(&grid, &base, &seeds, &out).map_err(Failure::input)?;
    let mut failed = Vec::new();
    if !a.aggregate_only {
        let exe = std::env::current_exe().map_err(Failure::runtime)?;
        failed = ablate::execute(&exe, &jobs, g.jobs).map_err(Failure::runtime)?;
    }
    let table = ablate::aggregate(&grid, &jobs, &base.data.eval_tasks);
    ablate::write_table(&table, &out).map_err(Failure::runtime)?;
    print!("{}", table.to_csv());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(anyhow!(
            "{} of {} runs failed; see train.log in their run directories",
            failed.len(),
            jobs.len()
        )))
    }
}
