//! Annotation ingestion, synthetic corpora and the hard-negative noun lexicon.
//!
//! A [`Corpus`] is the joined, validated view every downstream stage reads:
//! class table, image pixels, image-level labels, boxes, captions and the
//! lexicon. Values are immutable once built.

mod lexicon;
mod parse;
mod store;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{build_lexicon, extract_nouns, Lexicon, DEFAULT_LEXICON_TSV};
pub use parse::{parse_box_labels, parse_class_descriptions, parse_image_labels, parse_localized_narratives};
pub use store::{load_corpus, read_pixel_file, save_corpus, CorpusManifest, CORPUS_FORMAT_VERSION};
pub use synth::{rendered_names, synth_corpus, Glyph, ObjectVocab, Shape, SynthCorpusConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },
    #[error("unknown class ids referenced: {}", .0.join(", "))]
    MissingClasses(Vec<String>),
    #[error("lexicon relatives are neither nouns nor class names: {}", .0.join(", "))]
    UnknownRelatives(Vec<String>),
    #[error("invalid synthetic corpus config: {0}")]
    Config(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: String,
    pub display_name: String,
}

/// Ordered class table with id lookup.
#[derive(Clone, Debug, Default)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for ClassTable {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ClassTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; returns `false` if the id already exists.
    pub fn insert(&mut self, entry: ClassEntry) -> bool {
        if self.index.contains_key(&entry.class_id) {
            return false;
        }
        self.index.insert(entry.class_id.clone(), self.entries.len());
        self.entries.push(entry);
        true
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassEntry> {
        self.index.get(class_id).map(|&i| &self.entries[i])
    }

    pub fn display_name(&self, class_id: &str) -> Option<&str> {
        self.get(class_id).map(|e| e.display_name.as_str())
    }

    pub fn contains(&self, class_id: &str) -> bool {
        self.index.contains_key(class_id)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    File,
    Synthetic,
}

/// Dense `height × width × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub source: ImageSource,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        source: ImageSource,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(CorpusError::Format(format!(
                "image {image_id}: {} values for {height}x{width}x3",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(CorpusError::Format(format!(
                "image {image_id}: pixel values must be finite and within [0, 1]"
            )));
        }
        Ok(ImageRecord { image_id, height, width, pixels, source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presence {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verification {
    Machine,
    Human,
}

impl Verification {
    /// Source strings containing "verification" mark human-verified labels.
    pub fn from_source(source: &str) -> Self {
        if source.contains("verification") {
            Verification::Human
        } else {
            Verification::Machine
        }
    }

    pub fn as_source(self) -> &'static str {
        match self {
            Verification::Human => "verification",
            Verification::Machine => "machine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLabel {
    pub image_id: String,
    pub class_id: String,
    pub presence: Presence,
    pub verification: Verification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub image_id: String,
    pub class_id: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// Which annotations count as "objects present" for object-aware tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSource {
    Labels,
    Boxes,
    #[default]
    Union,
}

/// Joined, referentially consistent annotation corpus.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub classes: ClassTable,
    pub lexicon: Lexicon,
    pub seed: Option<u64>,
    image_ids: BTreeSet<String>,
    images: BTreeMap<String, ImageRecord>,
    labels: BTreeMap<String, Vec<ImageLabel>>,
    boxes: BTreeMap<String, Vec<BoxLabel>>,
    captions: BTreeMap<String, Vec<CaptionRecord>>,
    hidden_positives: BTreeMap<String, BTreeSet<String>>,
    rendered: BTreeMap<String, Vec<String>>,
    dropped: usize,
}

impl PartialEq for Corpus {
    /// Structural equality; the join's drop counter is not part of it.
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.lexicon == other.lexicon
            && self.seed == other.seed
            && self.image_ids == other.image_ids
            && self.images == other.images
            && self.labels == other.labels
            && self.boxes == other.boxes
            && self.captions == other.captions
            && self.hidden_positives == other.hidden_positives
            && self.rendered == other.rendered
    }
}

/// Inputs to [`build_corpus`] beyond the four annotation lists.
#[derive(Clone, Debug, Default)]
pub struct CorpusExtras {
    pub hidden_positives: BTreeMap<String, BTreeSet<String>>,
    pub rendered: BTreeMap<String, Vec<String>>,
    pub image_ids: Option<BTreeSet<String>>,
    pub seed: Option<u64>,
}

/// Joins parsed annotation lists into a [`Corpus`].
///
/// The image universe is the set of supplied images; without pixel data it
/// falls back to the captioned images, then to the labeled ones. Records for
/// images outside the universe are dropped and counted.
pub fn build_corpus(
    classes: ClassTable,
    labels: Vec<ImageLabel>,
    boxes: Vec<BoxLabel>,
    captions: Vec<CaptionRecord>,
    images: Vec<ImageRecord>,
) -> Result<Corpus> {
    build_corpus_with(classes, labels, boxes, captions, images, CorpusExtras::default())
}

pub fn build_corpus_with(
    classes: ClassTable,
    labels: Vec<ImageLabel>,
    boxes: Vec<BoxLabel>,
    captions: Vec<CaptionRecord>,
    images: Vec<ImageRecord>,
    extras: CorpusExtras,
) -> Result<Corpus> {
    let mut missing: BTreeSet<String> = BTreeSet::new();
    let class_refs = labels
        .iter()
        .map(|l| &l.class_id)
        .chain(boxes.iter().map(|b| &b.class_id))
        .chain(extras.hidden_positives.values().flatten())
        .chain(extras.rendered.values().flatten());
    for id in class_refs {
        if !classes.contains(id) {
            missing.insert(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(CorpusError::MissingClasses(missing.into_iter().collect()));
    }

    let universe: BTreeSet<String> = if let Some(ids) = extras.image_ids {
        ids
    } else if !images.is_empty() {
        images.iter().map(|i| i.image_id.clone()).collect()
    } else if !captions.is_empty() {
        captions.iter().map(|c| c.image_id.clone()).collect()
    } else {
        labels.iter().map(|l| l.image_id.clone()).collect()
    };

    let mut corpus = Corpus { classes, seed: extras.seed, image_ids: universe, ..Default::default() };

    for img in images {
        if corpus.image_ids.contains(&img.image_id) {
            corpus.images.insert(img.image_id.clone(), img);
        } else {
            corpus.dropped += 1;
        }
    }

    let mut seen: HashMap<(String, String, Presence), usize> = HashMap::new();
    for label in labels {
        if !corpus.image_ids.contains(&label.image_id) {
            corpus.dropped += 1;
            continue;
        }
        let key = (label.image_id.clone(), label.class_id.clone(), label.presence);
        let list = corpus.labels.entry(label.image_id.clone()).or_default();
        match seen.get(&key) {
            Some(&pos) => {
                if label.verification == Verification::Human {
                    list[pos].verification = Verification::Human;
                }
            }
            None => {
                seen.insert(key, list.len());
                list.push(label);
            }
        }
    }
    for b in boxes {
        if corpus.image_ids.contains(&b.image_id) {
            corpus.boxes.entry(b.image_id.clone()).or_default().push(b);
        } else {
            corpus.dropped += 1;
        }
    }
    for c in captions {
        if corpus.image_ids.contains(&c.image_id) {
            corpus.captions.entry(c.image_id.clone()).or_default().push(c);
        } else {
            corpus.dropped += 1;
        }
    }
    for (image_id, hidden) in extras.hidden_positives {
        if !corpus.image_ids.contains(&image_id) {
            corpus.dropped += 1;
            continue;
        }
        let labeled = corpus.labeled_positives(&image_id);
        if let Some(clash) = hidden.iter().find(|c| labeled.contains(*c)) {
            return Err(CorpusError::Format(format!(
                "image {image_id}: hidden positive {clash} is also a labeled positive"
            )));
        }
        if !hidden.is_empty() {
            corpus.hidden_positives.insert(image_id, hidden);
        }
    }
    for (image_id, objs) in extras.rendered {
        if corpus.image_ids.contains(&image_id) {
            corpus.rendered.insert(image_id, objs);
        }
    }
    if corpus.dropped > 0 {
        log::warn!("dropped {} records referencing unknown images", corpus.dropped);
    }
    Ok(corpus)
}

impl Corpus {
    /// Attaches a lexicon after checking that every related noun is itself a
    /// lexicon key or a class display name.
    pub fn with_lexicon(mut self, lexicon: Lexicon) -> Result<Self> {
        let names: BTreeSet<&str> = self.classes.entries().iter().map(|e| e.display_name.as_str()).collect();
        let unknown: BTreeSet<String> = lexicon
            .iter()
            .flat_map(|(_, rel)| rel.iter())
            .filter(|r| !lexicon.contains(r) && !names.contains(r.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(CorpusError::UnknownRelatives(unknown.into_iter().collect()));
        }
        self.lexicon = lexicon;
        Ok(self)
    }

    /// Image ids in sorted order.
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.image_ids.iter().map(String::as_str)
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn contains_image(&self, image_id: &str) -> bool {
        self.image_ids.contains(image_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn labels(&self, image_id: &str) -> &[ImageLabel] {
        self.labels.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn boxes(&self, image_id: &str) -> &[BoxLabel] {
        self.boxes.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn captions(&self, image_id: &str) -> &[CaptionRecord] {
        self.captions.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn all_captions(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.captions.values().flatten()
    }

    pub fn all_labels(&self) -> impl Iterator<Item = &ImageLabel> {
        self.labels.values().flatten()
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &BoxLabel> {
        self.boxes.values().flatten()
    }

    pub fn num_captions(&self) -> usize {
        self.captions.values().map(Vec::len).sum()
    }

    /// Number of records dropped during the join.
    pub fn dropped_records(&self) -> usize {
        self.dropped
    }

    /// Objects rendered in the pixels but absent from the labels.
    pub fn hidden_positives(&self, image_id: &str) -> Option<&BTreeSet<String>> {
        self.hidden_positives.get(image_id)
    }

    pub fn all_hidden_positives(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.hidden_positives
    }

    /// Placement record of a synthetic image: every rendered class id in
    /// placement order.
    pub fn rendered(&self, image_id: &str) -> Option<&[String]> {
        self.rendered.get(image_id).map(Vec::as_slice)
    }

    pub fn all_rendered(&self) -> &BTreeMap<String, Vec<String>> {
        &self.rendered
    }

    /// Human-verified negatives of an image.
    fn human_negatives(&self, image_id: &str) -> BTreeSet<&str> {
        self.labels(image_id)
            .iter()
            .filter(|l| l.presence == Presence::Negative && l.verification == Verification::Human)
            .map(|l| l.class_id.as_str())
            .collect()
    }

    /// Positive image-level labels, excluding any class a human verified as
    /// absent.
    pub fn labeled_positives(&self, image_id: &str) -> BTreeSet<String> {
        let negatives = self.human_negatives(image_id);
        self.labels(image_id)
            .iter()
            .filter(|l| l.presence == Presence::Positive && !negatives.contains(l.class_id.as_str()))
            .map(|l| l.class_id.clone())
            .collect()
    }

    /// Class ids treated as present for object-aware tasks.
    pub fn positives(&self, image_id: &str, source: ObjectSource) -> BTreeSet<String> {
        let from_boxes = || {
            let negatives = self.human_negatives(image_id);
            self.boxes(image_id)
                .iter()
                .filter(|b| !negatives.contains(b.class_id.as_str()))
                .map(|b| b.class_id.clone())
                .collect::<BTreeSet<_>>()
        };
        match source {
            ObjectSource::Labels => self.labeled_positives(image_id),
            ObjectSource::Boxes => from_boxes(),
            ObjectSource::Union => {
                let mut set = self.labeled_positives(image_id);
                set.extend(from_boxes());
                set
            }
        }
    }

    /// Human-verified negative class ids, sorted.
    pub fn verified_negatives(&self, image_id: &str) -> Vec<String> {
        self.human_negatives(image_id).into_iter().map(str::to_owned).collect()
    }

    pub fn display_name(&self, class_id: &str) -> &str {
        self.classes.display_name(class_id).expect("class ids are validated at build time")
    }
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests;
