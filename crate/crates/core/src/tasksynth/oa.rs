use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{NegativePolicy, Result, SynthConfig, SynthError, TaskExample, TaskKind, TaskMeta};
use crate::corpus::{normalize_text, Corpus};

pub const LIST_PROMPT: &str = "list all objects";

const ANDOR_REDRAWS: usize = 20;

/// Prompt-facing object name.
fn object_name(corpus: &Corpus, class_id: &str) -> String {
    normalize_text(corpus.display_name(class_id))
}

/// "a", "a or b", "a, b and c".
pub(crate) fn join_objects(names: &[String], connective: &str) -> String {
    match names {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} {connective} {last}", init.join(", ")),
    }
}

struct Pools {
    positives: Vec<String>,
    distractors: Vec<String>,
}

fn pools(kind: TaskKind, image_id: &str, corpus: &Corpus, cfg: &SynthConfig) -> Result<Option<Pools>> {
    let positives: BTreeSet<String> = corpus.positives(image_id, cfg.object_source);
    if positives.is_empty() {
        return Ok(None);
    }
    let distractors: Vec<String> = match cfg.policy {
        NegativePolicy::Easy => corpus
            .classes
            .entries()
            .iter()
            .filter(|e| !positives.contains(&e.class_id))
            .map(|e| e.class_id.clone())
            .collect(),
        NegativePolicy::Hard => corpus.verified_negatives(image_id),
    };
    if distractors.is_empty() {
        return Err(SynthError::PolicyUnavailable { kind, policy: cfg.policy, image_id: image_id.to_owned() });
    }
    Ok(Some(Pools { positives: positives.into_iter().collect(), distractors }))
}

fn draw<R: Rng + ?Sized>(pool: &[String], n: usize, rng: &mut R) -> Vec<String> {
    rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
}

fn oa_example(image_id: &str, kind: TaskKind, prompt: String, target: &str) -> TaskExample {
    TaskExample { image_id: image_id.to_owned(), kind, prompt, target: target.to_owned(), meta: TaskMeta::default() }
}

/// Sorted display names of every present object. `None` when there are none.
pub fn synth_oa_list(image_id: &str, corpus: &Corpus, cfg: &SynthConfig) -> Option<TaskExample> {
    let mut names: Vec<String> =
        corpus.positives(image_id, cfg.object_source).iter().map(|c| object_name(corpus, c)).collect();
    if names.is_empty() {
        return None;
    }
    names.sort();
    names.dedup();
    let mut ex = oa_example(image_id, TaskKind::OaList, LIST_PROMPT.to_owned(), &names.join(", "));
    ex.meta.candidate_objects = Some(names);
    Some(ex)
}

pub fn synth_oa_exists<R: Rng + ?Sized>(
    image_id: &str,
    corpus: &Corpus,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Option<TaskExample>> {
    let Some(p) = pools(TaskKind::OaExists, image_id, corpus, cfg)? else {
        return Ok(None);
    };
    let (class_id, target, policy) = if rng.random::<f64>() < cfg.yes_no_balance {
        (&p.positives[rng.random_range(0..p.positives.len())], "yes", None)
    } else {
        let d = &p.distractors[rng.random_range(0..p.distractors.len())];
        (d, "no", Some(cfg.policy))
    };
    let name = object_name(corpus, class_id);
    let mut ex = oa_example(image_id, TaskKind::OaExists, format!("does {name} exist?"), target);
    ex.meta.policy = policy;
    ex.meta.candidate_objects = Some(vec![name]);
    Ok(Some(ex))
}

/// Conjunctive or disjunctive existence over 2 or 3 objects. The mix of
/// positives is redrawn until the target agrees with a balanced coin, up to
/// a fixed number of attempts.
pub fn synth_oa_andor<R: Rng + ?Sized>(
    image_id: &str,
    corpus: &Corpus,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Option<TaskExample>> {
    let Some(p) = pools(TaskKind::OaAndOr, image_id, corpus, cfg)? else {
        return Ok(None);
    };
    let k = cfg.andor_k[rng.random_range(0..cfg.andor_k.len())];
    let connective = if rng.random::<bool>() { "and" } else { "or" };
    let feasible: Vec<usize> = (0..=k).filter(|&m| m <= p.positives.len() && k - m <= p.distractors.len()).collect();
    if feasible.is_empty() {
        return Ok(None);
    }
    let want_yes = rng.random::<f64>() < cfg.yes_no_balance;

    let mut chosen = Vec::new();
    let mut yes = false;
    for _ in 0..ANDOR_REDRAWS {
        let m = feasible[rng.random_range(0..feasible.len())];
        yes = match connective {
            "and" => m == k,
            _ => m >= 1,
        };
        let mut objs = draw(&p.positives, m, rng);
        objs.extend(draw(&p.distractors, k - m, rng));
        objs.shuffle(rng);
        chosen = objs;
        if yes == want_yes {
            break;
        }
    }

    let names: Vec<String> = chosen.iter().map(|c| object_name(corpus, c)).collect();
    let target = if yes { "yes" } else { "no" };
    let prompt = format!("does {} exist?", join_objects(&names, connective));
    let mut ex = oa_example(image_id, TaskKind::OaAndOr, prompt, target);
    ex.meta.policy = Some(cfg.policy);
    ex.meta.connective = Some(connective.to_owned());
    ex.meta.candidate_objects = Some(names);
    Ok(Some(ex))
}

/// Three candidates, at least one present and one absent; the target names
/// the present ones in prompt order.
pub fn synth_oa_which<R: Rng + ?Sized>(
    image_id: &str,
    corpus: &Corpus,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Option<TaskExample>> {
    let Some(p) = pools(TaskKind::OaWhich, image_id, corpus, cfg)? else {
        return Ok(None);
    };
    let feasible: Vec<usize> = (1..=2).filter(|&m| m <= p.positives.len() && 3 - m <= p.distractors.len()).collect();
    if feasible.is_empty() {
        return Ok(None);
    }
    let m = feasible[rng.random_range(0..feasible.len())];
    let pos = draw(&p.positives, m, rng);
    let mut objs = pos.clone();
    objs.extend(draw(&p.distractors, 3 - m, rng));
    objs.shuffle(rng);

    let names: Vec<String> = objs.iter().map(|c| object_name(corpus, c)).collect();
    let present: Vec<String> = objs.iter().filter(|c| pos.contains(c)).map(|c| object_name(corpus, c)).collect();
    let prompt = format!("which of {} exist?", join_objects(&names, "and"));
    let mut ex = oa_example(image_id, TaskKind::OaWhich, prompt, &present.join(", "));
    ex.meta.policy = Some(cfg.policy);
    ex.meta.candidate_objects = Some(names);
    Ok(Some(ex))
}
