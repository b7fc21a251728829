use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};

use super::{CorpusError, Result};

/// Bundled relatives for the default synthetic object vocabulary.
pub const DEFAULT_LEXICON_TSV: &str = include_str!("../../data/lexicon.tsv");

/// Noun → ordered list of related nouns, used to build hard negatives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn related(&self, noun: &str) -> &[String] {
        self.entries.get(noun).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, noun: &str) -> bool {
        self.entries.contains_key(noun)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}\t{}\n", v.join(","))).collect()
    }

    pub fn bundled() -> Self {
        build_lexicon(DEFAULT_LEXICON_TSV.as_bytes()).expect("bundled lexicon is well-formed")
    }
}

/// Parses `noun<TAB>rel1,rel2,...` rows. Self-references and repeated
/// relatives are removed; a noun appearing twice as a key is an error.
pub fn build_lexicon<R: Read>(stream: R) -> Result<Lexicon> {
    let mut entries = BTreeMap::new();
    for (i, line) in BufReader::new(stream).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (noun, rest) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        let noun = noun.trim().to_lowercase();
        if noun.is_empty() {
            return Err(CorpusError::Parse { line: i + 1, message: "empty noun".into() });
        }
        let mut related: Vec<String> = Vec::new();
        for r in rest.split(',').map(|r| r.trim().to_lowercase()) {
            if !r.is_empty() && r != noun && !related.contains(&r) {
                related.push(r);
            }
        }
        if entries.insert(noun.clone(), related).is_some() {
            return Err(CorpusError::Parse { line: i + 1, message: format!("duplicate noun `{noun}`") });
        }
    }
    Ok(Lexicon { entries })
}

/// Lowercased, punctuation-stripped form of a caption token.
pub(crate) fn clean_token(token: &str) -> String {
    token.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase()
}

/// Whitespace tokens of `caption` that are lexicon nouns, with their indices.
pub fn extract_nouns(caption: &str, lexicon: &Lexicon) -> Vec<(usize, String)> {
    caption
        .split_whitespace()
        .enumerate()
        .filter_map(|(i, tok)| {
            let t = clean_token(tok);
            lexicon.contains(&t).then_some((i, t))
        })
        .collect()
}
