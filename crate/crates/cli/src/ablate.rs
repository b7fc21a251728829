//! Ablation grids: variants × seeds as child processes, then a comparison
//! table aggregated from the stored run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use mixpretrain::run::{read_summary, RunConfig, RunSummary};
use mixpretrain::tasksynth::{NegativePolicy, TaskKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Rows are variants, columns the evaluated task kinds.
    Mixture,
    /// Rows are task kinds, columns the variants.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub tasks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    #[serde(default = "default_layout")]
    pub layout: Layout,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

fn default_layout() -> Layout {
    Layout::Mixture
}

const CM: [&str; 4] = ["caption", "completion", "itm", "mlm"];
const CM_HARD: [&str; 4] = ["caption", "completion", "itm:hard", "mlm"];
const OA234: [&str; 3] = ["oa_exists", "oa_andor", "oa_which"];

fn variant(name: &str, parts: &[&[&str]]) -> Variant {
    Variant { name: name.to_owned(), tasks: parts.iter().flat_map(|p| p.iter().map(|s| (*s).to_owned())).collect() }
}

/// The nine task-mixture rows.
pub fn table1() -> Grid {
    let oa234_hard: Vec<String> = OA234.iter().map(|t| format!("{t}:hard")).collect();
    let oa234_hard: Vec<&str> = oa234_hard.iter().map(String::as_str).collect();
    Grid {
        name: "table1".into(),
        layout: Layout::Mixture,
        seeds: Vec::new(),
        variants: vec![
            variant("Caption-only", &[&["caption"]]),
            variant("MLM-only", &[&["mlm"]]),
            variant("CM-mix", &[&CM]),
            variant("CM-mix+Hard", &[&CM_HARD]),
            variant("CM-mix+OA1", &[&CM, &["oa_list"]]),
            variant("OA-2-3-4", &[&OA234]),
            variant("CM-mix+OA-2-3-4", &[&CM, &OA234]),
            variant("CM-mix+OA-mix", &[&CM, &["oa_list"], &OA234]),
            variant("CM-mix+Hard+OA-mix", &[&CM_HARD, &["oa_list"], &oa234_hard]),
        ],
    }
}

/// Easy against hard distractors for the three question tasks.
pub fn table2() -> Grid {
    let with = |p: NegativePolicy| -> Vec<String> { OA234.iter().map(|t| format!("{t}:{}", p.name())).collect() };
    Grid {
        name: "table2".into(),
        layout: Layout::Policy,
        seeds: Vec::new(),
        variants: vec![
            Variant { name: "easy".into(), tasks: with(NegativePolicy::Easy) },
            Variant { name: "hard".into(), tasks: with(NegativePolicy::Hard) },
        ],
    }
}

/// Built-in grid name or path to a grid file.
pub fn load_grid(spec: &str) -> Result<Grid> {
    match spec {
        "paper-table1" => Ok(table1()),
        "paper-table2" => Ok(table2()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading grid {path}"))?;
            let grid: Grid = toml::from_str(&text).with_context(|| format!("parsing grid {path}"))?;
            if grid.variants.is_empty() {
                bail!("grid {path} has no variants");
            }
            Ok(grid)
        }
    }
}

/// File-system friendly variant name.
pub fn slug(name: &str) -> String {
    let s: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Debug)]
pub struct Job {
    pub variant: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub config_path: PathBuf,
}

/// Variant configs for every seed, written under `out/configs`.
pub fn plan(grid: &Grid, base: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<Job>> {
    let mut names = std::collections::BTreeSet::new();
    for v in &grid.variants {
        if !names.insert(slug(&v.name)) {
            bail!("variant names collide: {}", v.name);
        }
    }
    fs::create_dir_all(out.join("configs"))?;
    let mut jobs = Vec::new();
    for (vi, v) in grid.variants.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.mixture.tasks = v.tasks.clone();
            cfg.mixture.weights = None;
            cfg.validate().with_context(|| format!("variant {}", v.name))?;
            let name = format!("{}-seed-{seed}", slug(&v.name));
            let config_path = out.join("configs").join(format!("{name}.toml"));
            fs::write(&config_path, cfg.to_toml())?;
            jobs.push(Job {
                variant: vi,
                seed,
                dir: out.join("runs").join(slug(&v.name)).join(format!("seed-{seed}")),
                config_path,
            });
        }
    }
    Ok(jobs)
}

/// True when the run directory already holds a finished run of this config.
pub fn is_complete(job: &Job) -> bool {
    let same_config = match (fs::read(&job.config_path), fs::read(job.dir.join("config.toml"))) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    same_config && read_summary(&job.dir).is_ok_and(|s| s.status == "complete")
}

fn spawn(exe: &Path, job: &Job) -> Result<Child> {
    fs::create_dir_all(&job.dir)?;
    let log = fs::File::create(job.dir.join("train.log"))?;
    let child = Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&job.config_path)
        .arg("--out")
        .arg(&job.dir)
        .stdout(Stdio::null())
        .stderr(log)
        .spawn()
        .with_context(|| format!("starting {}", exe.display()))?;
    Ok(child)
}

/// Runs pending jobs with at most `max_jobs` child processes alive. Returns
/// the indices of jobs that failed.
pub fn execute(exe: &Path, jobs: &[Job], max_jobs: usize) -> Result<Vec<usize>> {
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| !is_complete(&jobs[i])).collect();
    log::info!("{} runs, {} already complete", jobs.len(), jobs.len() - pending.len());
    let mut queue = pending.into_iter();
    let mut live: Vec<(usize, Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while live.len() < max_jobs.max(1) {
            let Some(i) = queue.next() else { break };
            log::info!("starting {}", jobs[i].dir.display());
            live.push((i, spawn(exe, &jobs[i])?));
        }
        if live.is_empty() {
            break;
        }
        let mut still = Vec::with_capacity(live.len());
        for (i, mut child) in live {
            match child.try_wait()? {
                Some(status) => {
                    if !status.success() {
                        log::warn!("run {} failed with {status}", jobs[i].dir.display());
                        failed.push(i);
                    }
                }
                None => still.push((i, child)),
            }
        }
        live = still;
        thread::sleep(Duration::from_millis(50));
    }
    failed.sort_unstable();
    Ok(failed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Cell {
    fn of(values: &[f64]) -> Option<Cell> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std =
            if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Cell { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: BTreeMap<String, Option<Cell>>,
    /// Runs that did not produce a summary.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub grid: String,
    pub layout: Layout,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.columns {
            write!(out, ",{c}_mean,{c}_std").unwrap();
        }
        out.push_str(",failed\n");
        for r in &self.rows {
            out.push_str(&csv_field(&r.label));
            for c in &self.columns {
                match r.cells.get(c).copied().flatten() {
                    Some(cell) => write!(out, ",{:.6},{:.6}", cell.mean, cell.std).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            writeln!(out, ",{}", r.failed).unwrap();
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Builds the comparison table from whatever run directories exist.
pub fn aggregate(grid: &Grid, jobs: &[Job], eval_tasks: &[TaskKind]) -> Table {
    let mut per_variant: Vec<(Vec<RunSummary>, usize)> = vec![(Vec::new(), 0); grid.variants.len()];
    for job in jobs {
        let slot = &mut per_variant[job.variant];
        match read_summary(&job.dir) {
            Ok(s) if s.status == "complete" => slot.0.push(s),
            _ => slot.1 += 1,
        }
    }
    let cell = |runs: &[RunSummary], kind: TaskKind| -> Option<Cell> {
        let vals: Vec<f64> = runs.iter().filter_map(|s| s.eval.get(&kind).copied()).collect();
        Cell::of(&vals)
    };
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    match grid.layout {
        Layout::Mixture => {
            let mut columns: Vec<String> = eval_tasks.iter().map(|k| k.name().to_owned()).collect();
            columns.push("mean".into());
            let rows = grid
                .variants
                .iter()
                .zip(&per_variant)
                .map(|(v, (runs, failed))| {
                    let mut cells: BTreeMap<String, Option<Cell>> =
                        eval_tasks.iter().map(|&k| (k.name().to_owned(), cell(runs, k))).collect();
                    let means: Vec<f64> = runs
                        .iter()
                        .filter_map(|s| {
                            let v: Vec<f64> = eval_tasks.iter().filter_map(|k| s.eval.get(k).copied()).collect();
                            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                        })
                        .collect();
                    cells.insert("mean".into(), Cell::of(&means));
                    Row { label: v.name.clone(), cells, failed: *failed }
                })
                .collect();
            Table { grid: grid.name.clone(), layout: grid.layout, seeds, columns, rows }
        }
        Layout::Policy => {
            let columns: Vec<String> = grid.variants.iter().map(|v| v.name.clone()).collect();
            let failed: usize = per_variant.iter().map(|(_, f)| f).sum();
            let rows = eval_tasks
                .iter()
                .filter(|k| !matches!(k, TaskKind::OaList) && !k.is_cross_modal())
                .map(|&k| Row {
                    label: k.name().to_owned(),
                    cells: grid
                        .variants
                        .iter()
                        .zip(&per_variant)
                        .map(|(v, (runs, _))| (v.name.clone(), cell(runs, k)))
                        .collect(),
                    failed,
                })
                .collect();
            Table { grid: grid.name.clone(), layout: grid.layout, seeds, columns, rows }
        }
    }
}

/// Writes `<grid>.json` and `<grid>.csv`.
pub fn write_table(table: &Table, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(table)?;
    fs::write(out.join(format!("{}.json", table.grid)), json + "\n")?;
    fs::write(out.join(format!("{}.csv", table.grid)), table.to_csv())?;
    Ok(())
}
