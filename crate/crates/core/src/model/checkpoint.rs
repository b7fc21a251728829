//! Binary checkpoint.
//!
//! ```text
//! "MPT1" | version u32 LE | sha256[32] | header_len u32 LE | header JSON | payload
//! ```
//!
//! The digest covers everything after it. The payload is every parameter in
//! registration order as f32 LE, then the optimizer's first moments, then
//! its second moments.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{ModelConfig, ModelParams};
use super::train::TrainState;
use super::{ModelError, Result};
use crate::nnkernel::{Adam, AdamConfig, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MPT1";
const PREFIX: usize = 4 + 4 + 32 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    seed: u64,
    corpus_fingerprint: String,
    vocab_fingerprint: String,
    rng: RngState,
    adam: AdamConfig,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

fn push_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Checkpoint bytes for a training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let header = Header {
        config: state.params.config.clone(),
        step: state.step,
        seed: state.seed,
        corpus_fingerprint: state.corpus_fingerprint.clone(),
        vocab_fingerprint: state.vocab_fingerprint.clone(),
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam: state.adam.config,
        adam_step: state.adam.step,
        tensors: state
            .params
            .store
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(&header);
    for p in state.params.store.iter() {
        push_f32s(&mut body, &p.value);
    }
    for m in state.adam.first.iter().chain(&state.adam.second) {
        push_f32s(&mut body, m);
    }
    let mut out = Vec::with_capacity(PREFIX + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body[..]);
    out
}

fn integrity(msg: impl Into<String>) -> ModelError {
    ModelError::Integrity(msg.into())
}

/// Parses checkpoint bytes, verifying magic, version and digest.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(integrity("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < PREFIX {
        return Err(integrity("file truncated"));
    }
    let body = &bytes[40..];
    if Sha256::digest(body).as_slice() != &bytes[8..40] {
        return Err(integrity("stored digest does not match contents"));
    }
    let header_len = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
    let header_bytes = body.get(4..4 + header_len).ok_or_else(|| integrity("header truncated"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| integrity(format!("header: {e}")))?;

    let mut params = ModelParams::<f32>::init(&header.config, 0)?;
    if params.store.len() != header.tensors.len() {
        return Err(integrity("tensor count does not match the model layout"));
    }
    let mut payload =
        body[4 + header_len..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let expected: usize = 3 * params.num_parameters();
    if body.len() - 4 - header_len != expected * 4 {
        return Err(integrity("payload size does not match the tensor table"));
    }
    let mut read =
        |shape: &[usize]| -> Tensor<f32> { Tensor::from_fn(shape, |_| payload.next().expect("size checked")) };
    for (p, entry) in params.store.iter_mut().zip(&header.tensors) {
        if p.name != entry.name || p.value.shape() != entry.shape {
            return Err(integrity(format!(
                "tensor `{}` {:?} does not match layout `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        p.value = read(&entry.shape);
    }
    let mut adam = Adam::new(header.adam, &params.store);
    adam.step = header.adam_step;
    for m in adam.first.iter_mut().chain(adam.second.iter_mut()) {
        *m = read(m.shape());
    }

    let seed: [u8; 32] =
        hex::decode(&header.rng.seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| integrity("bad rng seed"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| integrity("bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        params,
        adam,
        step: header.step,
        seed: header.seed,
        rng,
        corpus_fingerprint: header.corpus_fingerprint,
        vocab_fingerprint: header.vocab_fingerprint,
    })
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
