use rand::Rng;

use super::{
    sentinel, NegativePolicy, Result, SynthConfig, SynthError, TaskExample, TaskKind, TaskMeta, MAX_SENTINELS,
};
use crate::corpus::{extract_nouns, normalize_text, CaptionRecord, Corpus, Lexicon};

pub const CAPTION_PROMPT: &str = "describe the image.";
pub const COMPLETION_PREFIX: &str = "complete: ";
pub const ITM_PREFIX: &str = "does this text match the image? ";

const MIN_TOKENS: usize = 4;
const EASY_REDRAWS: usize = 64;

fn example(record: &CaptionRecord, kind: TaskKind, prompt: String, target: String) -> TaskExample {
    TaskExample { image_id: record.image_id.clone(), kind, prompt, target, meta: TaskMeta::default() }
}

pub fn synth_caption(record: &CaptionRecord) -> Option<TaskExample> {
    let target = normalize_text(&record.caption);
    if target.is_empty() {
        return None;
    }
    Some(example(record, TaskKind::Caption, CAPTION_PROMPT.to_owned(), target))
}

/// Index splitting `len` tokens at fraction `f`, keeping both sides non-empty.
pub(crate) fn completion_split(len: usize, f: f64) -> usize {
    ((f * len as f64).round() as usize).clamp(1, len - 1)
}

/// Prefix-to-suffix completion. `None` for captions under four tokens.
pub fn synth_completion<R: Rng + ?Sized>(
    record: &CaptionRecord,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Option<TaskExample> {
    let text = normalize_text(&record.caption);
    let tokens: Vec<&str> = text.split(' ').collect();
    if text.is_empty() || tokens.len() < MIN_TOKENS {
        return None;
    }
    let (lo, hi) = cfg.completion_split;
    let f = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let split = completion_split(tokens.len(), f);
    Some(example(
        record,
        TaskKind::Completion,
        format!("{COMPLETION_PREFIX}{}", tokens[..split].join(" ")),
        tokens[split..].join(" "),
    ))
}

/// Replaces sorted, disjoint, non-adjacent `(start, len)` spans with
/// sentinels and returns `(prompt, target)`.
pub(crate) fn apply_spans(tokens: &[&str], spans: &[(usize, usize)]) -> (String, String) {
    let mut prompt = Vec::new();
    let mut target = Vec::new();
    let mut pos = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        prompt.extend(tokens[pos..start].iter().map(|t| t.to_string()));
        let s = sentinel(k);
        prompt.push(s.clone());
        target.push(s);
        target.extend(tokens[start..start + len].iter().map(|t| t.to_string()));
        pos = start + len;
    }
    prompt.extend(tokens[pos..].iter().map(|t| t.to_string()));
    (prompt.join(" "), target.join(" "))
}

/// Geometric span lengths placed at random free positions until the mask
/// budget is spent. Spans never touch, so each sentinel covers one span.
pub(crate) fn draw_spans<R: Rng + ?Sized>(n: usize, cfg: &SynthConfig, rng: &mut R) -> Vec<(usize, usize)> {
    let budget = ((n as f64 * cfg.mlm_mask_rate).round() as usize).clamp(1, n - 1);
    let p = 1.0 / cfg.mlm_mean_span;
    let mut taken = vec![false; n];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut masked = 0;
    while masked < budget && spans.len() < MAX_SENTINELS {
        let room = budget - masked;
        let mut len = 1;
        while len < room && rng.random::<f64>() >= p {
            len += 1;
        }
        let placed = loop {
            let starts: Vec<usize> = (0..=n - len)
                .filter(|&s| {
                    let lo = s.saturating_sub(1);
                    let hi = (s + len).min(n - 1);
                    (lo..=hi).all(|i| !taken[i])
                })
                .collect();
            if !starts.is_empty() {
                break Some(starts[rng.random_range(0..starts.len())]);
            }
            if len == 1 {
                break None;
            }
            len -= 1;
        };
        let Some(start) = placed else { break };
        for t in &mut taken[start..start + len] {
            *t = true;
        }
        spans.push((start, len));
        masked += len;
    }
    spans.sort_unstable();
    spans
}

/// Span corruption with `<extra_k>` sentinels. `None` for captions under
/// four tokens.
pub fn synth_mlm<R: Rng + ?Sized>(record: &CaptionRecord, cfg: &SynthConfig, rng: &mut R) -> Option<TaskExample> {
    let text = normalize_text(&record.caption);
    let tokens: Vec<&str> = text.split(' ').collect();
    if text.is_empty() || tokens.len() < MIN_TOKENS {
        return None;
    }
    let spans = draw_spans(tokens.len(), cfg, rng);
    let (prompt, target) = apply_spans(&tokens, &spans);
    Some(example(record, TaskKind::Mlm, prompt, target))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegative {
    pub caption: String,
    pub replaced_noun: String,
    pub replacement: String,
    pub token_index: usize,
}

/// Swaps one lexicon noun of `caption` for one of its relatives.
pub fn make_hard_negative_caption<R: Rng + ?Sized>(
    caption: &str,
    lexicon: &Lexicon,
    rng: &mut R,
) -> Result<HardNegative> {
    let candidates: Vec<(usize, String, Vec<&String>)> = extract_nouns(caption, lexicon)
        .into_iter()
        .filter_map(|(i, noun)| {
            let rel: Vec<&String> = lexicon.related(&noun).iter().filter(|r| **r != noun).collect();
            (!rel.is_empty()).then_some((i, noun, rel))
        })
        .collect();
    if candidates.is_empty() {
        return Err(SynthError::NoNounFound);
    }
    let (index, noun, related) = &candidates[rng.random_range(0..candidates.len())];
    let replacement = related[rng.random_range(0..related.len())].clone();

    let tokens: Vec<String> = caption
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            if i != *index {
                return tok.to_owned();
            }
            let is_punct = |c: char| c.is_ascii_punctuation();
            let core = tok.trim_matches(is_punct);
            let head = &tok[..tok.len() - tok.trim_start_matches(is_punct).len()];
            let tail = &tok[head.len() + core.len()..];
            format!("{head}{replacement}{tail}")
        })
        .collect();
    Ok(HardNegative { caption: tokens.join(" "), replaced_noun: noun.clone(), replacement, token_index: *index })
}

fn easy_negative<'c, R: Rng + ?Sized>(
    record: &CaptionRecord,
    text: &str,
    corpus: &'c Corpus,
    rng: &mut R,
) -> Option<&'c CaptionRecord> {
    let pool: Vec<&CaptionRecord> = corpus.all_captions().filter(|c| c.image_id != record.image_id).collect();
    if pool.is_empty() {
        return None;
    }
    for _ in 0..EASY_REDRAWS {
        let c = pool[rng.random_range(0..pool.len())];
        if normalize_text(&c.caption) != text {
            return Some(c);
        }
    }
    let differing: Vec<&CaptionRecord> = pool.iter().copied().filter(|c| normalize_text(&c.caption) != text).collect();
    let from = if differing.is_empty() { &pool } else { &differing };
    Some(from[rng.random_range(0..from.len())])
}

/// Generative image-text matching. A Hard request on a caption without a
/// usable noun falls back to an Easy negative and says so in the meta.
pub fn synth_itm<R: Rng + ?Sized>(
    record: &CaptionRecord,
    corpus: &Corpus,
    lexicon: &Lexicon,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Option<TaskExample>> {
    let text = normalize_text(&record.caption);
    if text.is_empty() {
        return Ok(None);
    }
    let mut meta = TaskMeta { source_caption: Some(text.clone()), ..TaskMeta::default() };
    let matched = rng.random::<f64>() < cfg.yes_no_balance;
    let (shown, target) = if matched {
        (text.clone(), "yes")
    } else {
        let hard = match cfg.policy {
            NegativePolicy::Hard => match make_hard_negative_caption(&text, lexicon, rng) {
                Ok(h) => Some(h),
                Err(SynthError::NoNounFound) => None,
                Err(e) => return Err(e),
            },
            NegativePolicy::Easy => None,
        };
        match hard {
            Some(h) => {
                meta.policy = Some(NegativePolicy::Hard);
                meta.replaced_noun = Some(h.replaced_noun);
                meta.replacement = Some(h.replacement);
                (h.caption, "no")
            }
            None => {
                let other = easy_negative(record, &text, corpus, rng).ok_or_else(|| SynthError::PolicyUnavailable {
                    kind: TaskKind::Itm,
                    policy: NegativePolicy::Easy,
                    image_id: record.image_id.clone(),
                })?;
                meta.policy = Some(NegativePolicy::Easy);
                meta.fallback = cfg.policy == NegativePolicy::Hard;
                meta.source_image = Some(other.image_id.clone());
                (normalize_text(&other.caption), "no")
            }
        }
    };
    let mut ex = example(record, TaskKind::Itm, format!("{ITM_PREFIX}{shown}"), target.to_owned());
    ex.meta = meta;
    Ok(Some(ex))
}
