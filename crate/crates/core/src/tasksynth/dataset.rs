use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    synth_caption, synth_completion, synth_itm, synth_mlm, synth_oa_andor, synth_oa_exists, synth_oa_list,
    synth_oa_which, Result, SynthConfig, SynthError, TaskExample, TaskKind,
};
use crate::corpus::Corpus;

/// RNG for one example, keyed by everything that identifies its slot.
pub fn example_rng(seed: u64, kind: TaskKind, image_id: &str, cycle: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"tasksynth");
    h.update(seed.to_le_bytes());
    h.update(kind.name().as_bytes());
    h.update([0]);
    h.update(image_id.as_bytes());
    h.update([0]);
    h.update(cycle.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub counts: BTreeMap<TaskKind, usize>,
    /// Hard requests that fell back to Easy.
    pub fallbacks: BTreeMap<TaskKind, usize>,
    /// Slots passed over because the image could not host the task.
    pub skipped: BTreeMap<TaskKind, usize>,
    /// Slots passed over because the negative pool was empty.
    pub unavailable: BTreeMap<TaskKind, usize>,
    /// Corpus fingerprint the tasks were compiled from.
    #[serde(default)]
    pub corpus_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub examples: Vec<TaskExample>,
    pub manifest: SynthManifest,
}

impl SynthOutput {
    pub fn of_kind(&self, kind: TaskKind) -> impl Iterator<Item = &TaskExample> {
        self.examples.iter().filter(move |e| e.kind == kind)
    }
}

fn generate(
    kind: TaskKind,
    image_id: &str,
    cycle: u64,
    corpus: &Corpus,
    cfg: &SynthConfig,
) -> Result<Option<TaskExample>> {
    let mut rng = example_rng(cfg.seed, kind, image_id, cycle);
    if kind.is_cross_modal() {
        let caps = corpus.captions(image_id);
        if caps.is_empty() {
            return Ok(None);
        }
        let record = &caps[(cycle % caps.len() as u64) as usize];
        return match kind {
            TaskKind::Caption => Ok(synth_caption(record)),
            TaskKind::Completion => Ok(synth_completion(record, cfg, &mut rng)),
            TaskKind::Mlm => Ok(synth_mlm(record, cfg, &mut rng)),
            _ => synth_itm(record, corpus, &corpus.lexicon, cfg, &mut rng),
        };
    }
    match kind {
        TaskKind::OaList => Ok(synth_oa_list(image_id, corpus, cfg)),
        TaskKind::OaExists => synth_oa_exists(image_id, corpus, cfg, &mut rng),
        TaskKind::OaAndOr => synth_oa_andor(image_id, corpus, cfg, &mut rng),
        _ => synth_oa_which(image_id, corpus, cfg, &mut rng),
    }
}

/// `count_per_kind` examples of each kind, cycling images in id order.
///
/// An image that cannot host a task hands its slot to the next image; a
/// kind that no image can host is an error.
pub fn synth_dataset(
    corpus: &Corpus,
    kinds: &[TaskKind],
    count_per_kind: usize,
    cfg: &SynthConfig,
) -> Result<SynthOutput> {
    let ids: Vec<&str> = corpus.image_ids().collect();
    synth_dataset_over(corpus, &ids, kinds, count_per_kind, cfg)
}

/// [`synth_dataset`] restricted to the given images, visited in the order
/// supplied.
pub fn synth_dataset_over(
    corpus: &Corpus,
    ids: &[&str],
    kinds: &[TaskKind],
    count_per_kind: usize,
    cfg: &SynthConfig,
) -> Result<SynthOutput> {
    cfg.validate()?;
    if let Some(bad) = ids.iter().find(|id| !corpus.contains_image(id)) {
        return Err(SynthError::Config(format!("unknown image `{bad}`")));
    }
    let mut manifest = SynthManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        corpus_fingerprint: corpus.fingerprint(),
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(kinds.len() * count_per_kind);

    for &kind in kinds {
        if ids.is_empty() && count_per_kind > 0 {
            return Err(SynthError::Synthesis(kind));
        }
        let mut pos: u64 = 0;
        let mut produced = 0;
        let mut misses = 0;
        while produced < count_per_kind {
            let image_id = ids[(pos % ids.len() as u64) as usize];
            let cycle = pos / ids.len() as u64;
            pos += 1;
            match generate(kind, image_id, cycle, corpus, cfg) {
                Ok(Some(ex)) => {
                    if ex.meta.fallback {
                        *manifest.fallbacks.entry(kind).or_default() += 1;
                    }
                    examples.push(ex);
                    produced += 1;
                    misses = 0;
                    continue;
                }
                Ok(None) => *manifest.skipped.entry(kind).or_default() += 1,
                Err(SynthError::PolicyUnavailable { .. }) => *manifest.unavailable.entry(kind).or_default() += 1,
                Err(e) => return Err(e),
            }
            misses += 1;
            if misses >= ids.len() {
                return Err(SynthError::Synthesis(kind));
            }
        }
        manifest.counts.insert(kind, produced);
    }
    log::debug!("synthesized {} examples", examples.len());
    Ok(SynthOutput { examples, manifest })
}

pub fn task_file_name(kind: TaskKind, cfg: &SynthConfig) -> String {
    format!("{}.{}.jsonl", kind.name(), cfg.policy.name())
}

/// Writes one `<kind>.<policy>.jsonl` per kind plus `synth_manifest.json`.
pub fn write_task_files(dir: &Path, output: &SynthOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut by_kind: BTreeMap<TaskKind, Vec<&TaskExample>> = BTreeMap::new();
    for ex in &output.examples {
        by_kind.entry(ex.kind).or_default().push(ex);
    }
    let mut written = Vec::new();
    for (kind, exs) in by_kind {
        let path = dir.join(task_file_name(kind, &output.manifest.config));
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        for ex in exs {
            let line = serde_json::to_string(ex).map_err(|e| SynthError::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        written.push(path);
    }
    let manifest = serde_json::to_string_pretty(&output.manifest).map_err(|e| SynthError::Io(e.to_string()))?;
    let path = dir.join("synth_manifest.json");
    fs::write(&path, manifest + "\n")?;
    written.push(path);
    Ok(written)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskExample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex =
            serde_json::from_str(&line).map_err(|e| SynthError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
