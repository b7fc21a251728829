//! On-disk corpus directory.
//!
//! ```text
//! manifest.json            counts, seed, format version
//! image-ids.txt            image universe, one id per line
//! class-descriptions.csv   class_id,display_name
//! image-labels.csv         image_id,source,class_id,confidence
//! boxes.csv                image_id,class_id,x_min,x_max,y_min,y_max
//! captions.jsonl           {"image_id":..,"caption":..}
//! lexicon.tsv              noun<TAB>rel,rel
//! hidden-positives.csv     image_id,class_id
//! rendered.csv             image_id,class_id (placement order)
//! pixels.bin               "PXL1", count, then per image: id, h, w, c, source, f32 LE data
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_corpus_with, build_lexicon, parse_box_labels, parse_class_descriptions, parse_image_labels,
    parse_localized_narratives, Corpus, CorpusError, CorpusExtras, ImageRecord, ImageSource, Presence, Result,
};

pub const CORPUS_FORMAT_VERSION: &str = "1";
const PIXEL_MAGIC: &[u8; 4] = b"PXL1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub classes: usize,
    pub images: usize,
    pub images_with_pixels: usize,
    pub labels: usize,
    pub boxes: usize,
    pub captions: usize,
    pub hidden_positives: usize,
    pub lexicon_nouns: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: String,
    pub seed: Option<u64>,
    pub counts: CorpusCounts,
    pub fingerprint: String,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Serialized files of a corpus in a fixed order (manifest excluded).
fn encode_files(corpus: &Corpus) -> Vec<(&'static str, Vec<u8>)> {
    let mut ids = String::new();
    for id in corpus.image_ids() {
        ids.push_str(id);
        ids.push('\n');
    }

    let mut classes = String::new();
    for e in corpus.classes.entries() {
        classes.push_str(&format!("{},{}\n", csv_field(&e.class_id), csv_field(&e.display_name)));
    }

    let mut labels = String::new();
    for l in corpus.all_labels() {
        let conf = match l.presence {
            Presence::Positive => 1,
            Presence::Negative => 0,
        };
        labels.push_str(&format!(
            "{},{},{},{conf}\n",
            csv_field(&l.image_id),
            l.verification.as_source(),
            csv_field(&l.class_id)
        ));
    }

    let mut boxes = String::new();
    for b in corpus.all_boxes() {
        boxes.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&b.image_id),
            csv_field(&b.class_id),
            b.x_min,
            b.x_max,
            b.y_min,
            b.y_max
        ));
    }

    let mut captions = String::new();
    for c in corpus.all_captions() {
        captions.push_str(&serde_json::to_string(c).expect("caption serializes"));
        captions.push('\n');
    }

    let mut hidden = String::new();
    for (id, set) in corpus.all_hidden_positives() {
        for c in set {
            hidden.push_str(&format!("{},{}\n", csv_field(id), csv_field(c)));
        }
    }

    let mut rendered = String::new();
    for (id, objs) in corpus.all_rendered() {
        for c in objs {
            rendered.push_str(&format!("{},{}\n", csv_field(id), csv_field(c)));
        }
    }

    let mut pixels = Vec::new();
    pixels.extend_from_slice(PIXEL_MAGIC);
    let imgs: Vec<&ImageRecord> = corpus.images().collect();
    pixels.extend_from_slice(&(imgs.len() as u32).to_le_bytes());
    for img in imgs {
        pixels.extend_from_slice(&(img.image_id.len() as u32).to_le_bytes());
        pixels.extend_from_slice(img.image_id.as_bytes());
        for dim in [img.height, img.width, 3] {
            pixels.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        pixels.push(match img.source {
            ImageSource::File => 0,
            ImageSource::Synthetic => 1,
        });
        for v in &img.pixels {
            pixels.extend_from_slice(&v.to_le_bytes());
        }
    }

    vec![
        ("image-ids.txt", ids.into_bytes()),
        ("class-descriptions.csv", classes.into_bytes()),
        ("image-labels.csv", labels.into_bytes()),
        ("boxes.csv", boxes.into_bytes()),
        ("captions.jsonl", captions.into_bytes()),
        ("lexicon.tsv", corpus.lexicon.to_tsv().into_bytes()),
        ("hidden-positives.csv", hidden.into_bytes()),
        ("rendered.csv", rendered.into_bytes()),
        ("pixels.bin", pixels),
    ]
}

fn fingerprint_files(files: &[(&str, Vec<u8>)]) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

impl Corpus {
    /// SHA-256 over the serialized corpus content.
    pub fn fingerprint(&self) -> String {
        fingerprint_files(&encode_files(self))
    }

    pub fn manifest(&self) -> CorpusManifest {
        let files = encode_files(self);
        CorpusManifest {
            format_version: CORPUS_FORMAT_VERSION.to_owned(),
            seed: self.seed,
            counts: CorpusCounts {
                classes: self.classes.len(),
                images: self.num_images(),
                images_with_pixels: self.images().count(),
                labels: self.all_labels().count(),
                boxes: self.all_boxes().count(),
                captions: self.num_captions(),
                hidden_positives: self.all_hidden_positives().values().map(|s| s.len()).sum(),
                lexicon_nouns: self.lexicon.len(),
            },
            fingerprint: fingerprint_files(&files),
        }
    }
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let files = encode_files(corpus);
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = corpus.manifest();
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf.get(*pos..*pos + 4).ok_or_else(|| CorpusError::Format("pixels.bin truncated".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

fn decode_pixels(buf: &[u8]) -> Result<Vec<ImageRecord>> {
    if buf.get(..4) != Some(PIXEL_MAGIC.as_slice()) {
        return Err(CorpusError::Format("pixels.bin: bad magic".into()));
    }
    let mut pos = 4;
    let n = read_u32(buf, &mut pos)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(buf, &mut pos)? as usize;
        let id = buf.get(pos..pos + len).ok_or_else(|| CorpusError::Format("pixels.bin truncated".into()))?;
        let id = String::from_utf8(id.to_vec())
            .map_err(|_| CorpusError::Format("pixels.bin: image id is not utf-8".into()))?;
        pos += len;
        let h = read_u32(buf, &mut pos)? as usize;
        let w = read_u32(buf, &mut pos)? as usize;
        let c = read_u32(buf, &mut pos)? as usize;
        if c != 3 {
            return Err(CorpusError::Format(format!("image {id}: {c} channels")));
        }
        let source = match buf.get(pos) {
            Some(0) => ImageSource::File,
            Some(1) => ImageSource::Synthetic,
            _ => return Err(CorpusError::Format("pixels.bin: bad source tag".into())),
        };
        pos += 1;
        let nbytes = h * w * c * 4;
        let raw = buf.get(pos..pos + nbytes).ok_or_else(|| CorpusError::Format("pixels.bin truncated".into()))?;
        pos += nbytes;
        let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push(ImageRecord::new(id, h, w, pixels, source)?);
    }
    Ok(out)
}

/// Reads a pixel file in the corpus directory format.
pub fn read_pixel_file(path: &Path) -> Result<Vec<ImageRecord>> {
    decode_pixels(&fs::read(path)?)
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr =
        csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| CorpusError::Format(e.to_string()))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CorpusError::Format(e.to_string()))?;
        if rec.len() != 2 {
            return Err(CorpusError::Format(format!("{}: expected 2 columns", path.display())));
        }
        out.push((rec[0].to_owned(), rec[1].to_owned()));
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| CorpusError::Format(format!("manifest.json: {e}")))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(CorpusError::Format(format!("unsupported corpus format version {:?}", manifest.format_version)));
    }
    let open = |name: &str| fs::File::open(dir.join(name));
    let classes = parse_class_descriptions(open("class-descriptions.csv")?)?;
    let labels = parse_image_labels(open("image-labels.csv")?)?;
    let boxes = parse_box_labels(open("boxes.csv")?)?;
    let captions = parse_localized_narratives(open("captions.jsonl")?)?;
    let lexicon = build_lexicon(open("lexicon.tsv")?)?;
    let images = decode_pixels(&fs::read(dir.join("pixels.bin"))?)?;
    let image_ids: BTreeSet<String> =
        fs::read_to_string(dir.join("image-ids.txt"))?.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();

    let mut hidden: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (id, c) in read_pairs(&dir.join("hidden-positives.csv"))? {
        hidden.entry(id).or_default().insert(c);
    }
    let mut rendered: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, c) in read_pairs(&dir.join("rendered.csv"))? {
        rendered.entry(id).or_default().push(c);
    }

    let extras = CorpusExtras { hidden_positives: hidden, rendered, image_ids: Some(image_ids), seed: manifest.seed };
    let corpus = build_corpus_with(classes, labels, boxes, captions, images, extras)?;
    let corpus = if lexicon.is_empty() { corpus } else { corpus.with_lexicon(lexicon)? };
    if corpus.fingerprint() != manifest.fingerprint {
        return Err(CorpusError::Format("corpus content does not match manifest fingerprint".into()));
    }
    Ok(corpus)
}
