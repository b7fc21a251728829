//! Word-level tokenizer and vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};
use crate::tasksynth::{
    sentinel, TaskExample, CAPTION_PROMPT, COMPLETION_PREFIX, ITM_PREFIX, LIST_PROMPT, MAX_SENTINELS,
};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const FIRST_SENTINEL: u32 = 3;
pub const FIRST_WORD: u32 = FIRST_SENTINEL + MAX_SENTINELS as u32;

const PUNCT: [char; 4] = [',', '.', '?', ':'];

/// Words every vocabulary carries regardless of the data.
fn template_words() -> Vec<String> {
    let fixed = "yes no and or does exist which of ,";
    [CAPTION_PROMPT, COMPLETION_PREFIX, ITM_PREFIX, LIST_PROMPT, fixed].iter().flat_map(|t| tokenize(t)).collect()
}

/// Lowercased words with `,` `.` `?` `:` split off as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let core = word.trim_start_matches(PUNCT);
        for c in word[..word.len() - core.len()].chars() {
            out.push(c.to_string());
        }
        let body = core.trim_end_matches(PUNCT);
        if !body.is_empty() {
            out.push(body.to_owned());
        }
        for c in core[body.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

/// Inverse of [`tokenize`] on normalized text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let attach = tok.len() == 1 && tok.starts_with(PUNCT);
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

fn specials() -> Vec<String> {
    let mut t = vec!["<pad>".to_owned(), "</s>".to_owned(), "<unk>".to_owned()];
    t.extend((0..MAX_SENTINELS).map(sentinel));
    t
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    /// Vocabulary over the given words, in the order supplied, after the
    /// special tokens.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens = specials();
        tokens.extend(words);
        let v = Vocab::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(ModelError::Vocab("duplicate token".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text up to the first end-of-sequence, ignoring padding.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> =
            ids.iter().take_while(|&&i| i != EOS).filter(|&&i| i != PAD).map(|&i| self.token(i)).collect();
        detokenize(&toks)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

/// Vocabulary over prompt and target words, most frequent first, ties in
/// lexicographic order. Template words are always present.
pub fn build_vocab<'a, I>(examples: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a TaskExample>,
{
    let specials = specials();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen = 0;
    for ex in examples {
        seen += 1;
        for tok in tokenize(&ex.prompt).into_iter().chain(tokenize(&ex.target)) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if seen == 0 {
        return Err(ModelError::Vocab("no examples to build a vocabulary from".into()));
    }
    counts.retain(|t, c| *c >= min_count && !specials.contains(t));
    for w in template_words() {
        counts.entry(w).or_insert(0);
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_words(words.into_iter().map(|(w, _)| w))
}
