//! Deterministic colored-shape corpora.
//!
//! Each image is a grid; 1–4 distinct objects occupy distinct cells. An
//! object is labeled with probability `1 − hidden_rate`; otherwise it stays
//! in the pixels but only shows up in `hidden_positives`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_corpus_with, BoxLabel, CaptionRecord, ClassEntry, ClassTable, Corpus, CorpusError, CorpusExtras, ImageLabel,
    ImageRecord, ImageSource, Lexicon, Presence, Result, Verification,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
}

impl Shape {
    /// Coverage test in cell coordinates `u, v ∈ [-1, 1]` (v grows downward).
    fn covers(self, u: f32, v: f32) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Square => u.abs() < 0.7 && v.abs() < 0.7,
            Shape::Circle => r2 < 0.75 * 0.75,
            Shape::Triangle => v > -0.75 && v < 0.75 && u.abs() < (v + 0.75) / 1.5 * 0.85,
            Shape::Cross => (u.abs() < 0.25 && v.abs() < 0.85) || (v.abs() < 0.25 && u.abs() < 0.85),
            Shape::Ring => r2 > 0.35 * 0.35 && r2 < 0.85 * 0.85,
            Shape::Diamond => u.abs() + v.abs() < 0.85,
            Shape::HBar => v.abs() < 0.3 && u.abs() < 0.9,
            Shape::VBar => u.abs() < 0.3 && v.abs() < 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: Shape,
    pub color: [f32; 3],
}

/// Object names and the glyph each renders as.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectVocab {
    pub objects: Vec<(String, Glyph)>,
}

const RED: [f32; 3] = [0.95, 0.15, 0.1];
const GREEN: [f32; 3] = [0.1, 0.85, 0.2];
const BLUE: [f32; 3] = [0.15, 0.3, 0.95];
const YELLOW: [f32; 3] = [0.95, 0.9, 0.1];
const CYAN: [f32; 3] = [0.1, 0.9, 0.9];
const MAGENTA: [f32; 3] = [0.9, 0.15, 0.9];
const WHITE: [f32; 3] = [0.95, 0.95, 0.95];
const ORANGE: [f32; 3] = [1.0, 0.55, 0.05];

impl Default for ObjectVocab {
    /// Twelve objects matching the bundled lexicon.
    fn default() -> Self {
        let g = |shape, color| Glyph { shape, color };
        let objects = [
            ("dog", g(Shape::Circle, RED)),
            ("cat", g(Shape::Circle, GREEN)),
            ("wolf", g(Shape::Square, RED)),
            ("bird", g(Shape::Diamond, CYAN)),
            ("car", g(Shape::Square, BLUE)),
            ("truck", g(Shape::Triangle, BLUE)),
            ("bus", g(Shape::Triangle, YELLOW)),
            ("cup", g(Shape::Ring, MAGENTA)),
            ("bottle", g(Shape::VBar, GREEN)),
            ("chair", g(Shape::Cross, YELLOW)),
            ("table", g(Shape::HBar, WHITE)),
            ("tree", g(Shape::Diamond, ORANGE)),
        ];
        ObjectVocab { objects: objects.into_iter().map(|(n, gl)| (n.to_owned(), gl)).collect() }
    }
}

impl ObjectVocab {
    pub fn class_id(name: &str) -> String {
        format!("/s/{name}")
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusConfig {
    pub seed: u64,
    pub n_images: usize,
    #[serde(default)]
    pub vocab: ObjectVocab,
    pub grid: (usize, usize),
    pub hidden_rate: f64,
    pub image_size: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            seed: 0,
            n_images: 500,
            vocab: ObjectVocab::default(),
            grid: (2, 2),
            hidden_rate: 0.0,
            image_size: 32,
        }
    }
}

/// Caption template over the labeled objects in placement order.
pub(crate) fn template_caption(names: &[&str]) -> String {
    if names.is_empty() {
        return "a photo".to_owned();
    }
    let objs: Vec<String> = names.iter().map(|n| format!("a {n}")).collect();
    format!("a photo of {}", objs.join(" and "))
}

fn render(rng: &mut ChaCha8Rng, size: usize, grid: (usize, usize), placed: &[(usize, Glyph)]) -> Vec<f32> {
    let mut px: Vec<f32> = (0..size * size * 3).map(|_| rng.random_range(0.0..0.1f32)).collect();
    let (ch, cw) = (size / grid.0, size / grid.1);
    for &(cell, glyph) in placed {
        let (gy, gx) = (cell / grid.1, cell % grid.1);
        let shade = rng.random_range(0.85..1.0f32);
        for y in 0..ch {
            for x in 0..cw {
                let u = (x as f32 + 0.5) / cw as f32 * 2.0 - 1.0;
                let v = (y as f32 + 0.5) / ch as f32 * 2.0 - 1.0;
                if glyph.shape.covers(u, v) {
                    let base = ((gy * ch + y) * size + gx * cw + x) * 3;
                    for c in 0..3 {
                        px[base + c] = (glyph.color[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    px
}

/// Generates a deterministic synthetic corpus with the bundled lexicon
/// attached when the default vocabulary is used.
pub fn synth_corpus(cfg: &SynthCorpusConfig) -> Result<Corpus> {
    let vocab = &cfg.vocab;
    if vocab.len() < 4 {
        return Err(CorpusError::Config(format!("object vocabulary needs at least 4 objects, got {}", vocab.len())));
    }
    let (gr, gc) = cfg.grid;
    if gr < 2 || gc < 2 {
        return Err(CorpusError::Config("grid must be at least 2x2".into()));
    }
    if !(0.0..=1.0).contains(&cfg.hidden_rate) {
        return Err(CorpusError::Config("hidden_rate must lie in [0, 1]".into()));
    }
    if cfg.image_size == 0 || cfg.image_size % gr != 0 || cfg.image_size % gc != 0 {
        return Err(CorpusError::Config(format!("image size {} not divisible by grid {gr}x{gc}", cfg.image_size)));
    }
    let names: BTreeSet<&str> = vocab.objects.iter().map(|(n, _)| n.as_str()).collect();
    if names.len() != vocab.len() {
        return Err(CorpusError::Config("object names must be distinct".into()));
    }

    let mut classes = ClassTable::new();
    for (name, _) in &vocab.objects {
        classes.insert(ClassEntry { class_id: ObjectVocab::class_id(name), display_name: name.clone() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = gr * gc;
    let width = cfg.n_images.max(1).to_string().len().max(4);
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut labels = Vec::new();
    let mut boxes = Vec::new();
    let mut captions = Vec::new();
    let mut extras = CorpusExtras { seed: Some(cfg.seed), ..Default::default() };

    for i in 0..cfg.n_images {
        let image_id = format!("syn{i:0width$}");
        let count = rng.random_range(1..=4usize.min(cells));
        let objs = sample(&mut rng, vocab.len(), count).into_vec();
        let slots = sample(&mut rng, cells, count).into_vec();

        let mut labeled_names = Vec::new();
        let mut hidden = BTreeSet::new();
        let mut rendered = Vec::new();
        for (&obj, &cell) in objs.iter().zip(&slots) {
            let name = vocab.objects[obj].0.as_str();
            let class_id = ObjectVocab::class_id(name);
            rendered.push(class_id.clone());
            if rng.random::<f64>() < cfg.hidden_rate {
                hidden.insert(class_id);
                continue;
            }
            labeled_names.push(name);
            let (gy, gx) = ((cell / gc) as f64, (cell % gc) as f64);
            boxes.push(BoxLabel {
                image_id: image_id.clone(),
                class_id: class_id.clone(),
                x_min: gx / gc as f64,
                y_min: gy / gr as f64,
                x_max: (gx + 1.0) / gc as f64,
                y_max: (gy + 1.0) / gr as f64,
            });
            labels.push(ImageLabel {
                image_id: image_id.clone(),
                class_id,
                presence: Presence::Positive,
                verification: Verification::Human,
            });
        }

        let absent: Vec<usize> = (0..vocab.len()).filter(|o| !objs.contains(o)).collect();
        let n_neg = absent.len().min(2);
        let mut negs: Vec<usize> = sample(&mut rng, absent.len(), n_neg).into_iter().map(|k| absent[k]).collect();
        negs.sort_unstable();
        for o in negs {
            labels.push(ImageLabel {
                image_id: image_id.clone(),
                class_id: ObjectVocab::class_id(&vocab.objects[o].0),
                presence: Presence::Negative,
                verification: Verification::Human,
            });
        }

        captions.push(CaptionRecord { image_id: image_id.clone(), caption: template_caption(&labeled_names) });

        let placed: Vec<(usize, Glyph)> =
            objs.iter().zip(&slots).map(|(&o, &cell)| (cell, vocab.objects[o].1)).collect();
        let pixels = render(&mut rng, cfg.image_size, cfg.grid, &placed);
        images.push(ImageRecord::new(
            image_id.clone(),
            cfg.image_size,
            cfg.image_size,
            pixels,
            ImageSource::Synthetic,
        )?);
        if !hidden.is_empty() {
            extras.hidden_positives.insert(image_id.clone(), hidden);
        }
        extras.rendered.insert(image_id, rendered);
    }

    let corpus = build_corpus_with(classes, labels, boxes, captions, images, extras)?;
    if *vocab == ObjectVocab::default() {
        corpus.with_lexicon(Lexicon::bundled())
    } else {
        Ok(corpus)
    }
}

/// Maps each rendered object of each image to its display name, for
/// diagnostics that need the pixel truth.
pub fn rendered_names(corpus: &Corpus) -> BTreeMap<String, Vec<String>> {
    corpus
        .all_rendered()
        .iter()
        .map(|(id, objs)| (id.clone(), objs.iter().map(|c| corpus.display_name(c).to_owned()).collect()))
        .collect()
}
