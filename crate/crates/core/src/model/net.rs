//! Encoder-decoder over `[vision patches ∥ prompt tokens]`.
//!
//! Pre-norm blocks, ReLU feed-forward, no linear biases. The token table is
//! shared between input embedding and output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::PAD;
use super::{ModelError, Result};
use crate::mixture::Batch;
use crate::nnkernel::{causal_mask, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_prompt_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
    /// Standard deviation of embedding tables at init.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            patch_size: 4,
            image_size: 32,
            max_prompt_len: 32,
            max_target_len: 16,
            vocab_size: 0,
            init_scale: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.max_prompt_len == 0 || self.max_target_len == 0 {
            return fail("sequence limits must be positive");
        }
        if self.vocab_size <= PAD as usize + 2 {
            return fail("vocab_size must cover the special tokens");
        }
        if self.d_ff == 0 || !(self.init_scale > 0.0) {
            return fail("d_ff and init_scale must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    fn text_positions(&self) -> usize {
        self.max_prompt_len.max(self.max_target_len)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfParams {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: AttnParams,
    norm_ff: Norm,
    ff: FfParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: AttnParams,
    norm_cross: Norm,
    cross_attn: AttnParams,
    norm_ff: Norm,
    ff: FfParams,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_kernel: ParamId,
    token_embed: ParamId,
    vision_pos: ParamId,
    text_pos: ParamId,
    modality: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
}

/// Model weights and the handles the forward pass needs to find them.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.store.add(name, t)
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.linear(format!("{name}.wq"), d, d),
            wk: self.linear(format!("{name}.wk"), d, d),
            wv: self.linear(format!("{name}.wv"), d, d),
            wo: self.linear(format!("{name}.wo"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> FfParams {
        FfParams { w1: self.linear(format!("{name}.w1"), d, d_ff), w2: self.linear(format!("{name}.w2"), d_ff, d) }
    }
}

impl<T: Real> ModelParams<T> {
    /// Fresh weights drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let p = c.patch_size;
        let patch_kernel = init.linear("patch.kernel".into(), p * p * 3, d);
        let token_embed = init.normal("embed.tokens".into(), &[c.vocab_size, d], c.init_scale);
        let vision_pos = init.normal("embed.vision_pos".into(), &[c.num_patches(), d], c.init_scale);
        let text_pos = init.normal("embed.text_pos".into(), &[c.text_positions(), d], c.init_scale);
        let modality = init.normal("embed.modality".into(), &[2, d], c.init_scale);
        let encoder = (0..c.n_encoder_layers)
            .map(|i| EncoderLayer {
                norm_attn: init.norm(&format!("enc{i}.norm_attn"), d),
                attn: init.attn(&format!("enc{i}.attn"), d),
                norm_ff: init.norm(&format!("enc{i}.norm_ff"), d),
                ff: init.ff(&format!("enc{i}.ff"), d, c.d_ff),
            })
            .collect();
        let encoder_norm = init.norm("enc.norm", d);
        let decoder = (0..c.n_decoder_layers)
            .map(|i| DecoderLayer {
                norm_self: init.norm(&format!("dec{i}.norm_self"), d),
                self_attn: init.attn(&format!("dec{i}.self_attn"), d),
                norm_cross: init.norm(&format!("dec{i}.norm_cross"), d),
                cross_attn: init.attn(&format!("dec{i}.cross_attn"), d),
                norm_ff: init.norm(&format!("dec{i}.norm_ff"), d),
                ff: init.ff(&format!("dec{i}.ff"), d, c.d_ff),
            })
            .collect();
        let decoder_norm = init.norm("dec.norm", d);
        let layout = Layout {
            patch_kernel,
            token_embed,
            vision_pos,
            text_pos,
            modality,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        };
        Ok(ModelParams { config: config.clone(), store, layout })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { config: self.config.clone(), store: self.store.cast(), layout: self.layout.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|p| p.value.is_finite())
    }
}

/// Token-level inputs for one forward pass, independent of [`Batch`] so
/// generation can feed its own prefixes.
#[derive(Clone, Debug)]
pub struct TextInputs<'a> {
    pub batch: usize,
    pub prompt_ids: &'a [u32],
    pub prompt_mask: &'a [bool],
    pub prompt_len: usize,
}

/// Encoder activations for a batch, kept on the tape for the decoder.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub out: Var,
    pub batch: usize,
    pub len: usize,
    /// Additive key mask, 0 for real tokens and `-inf` for padding.
    key_mask: Vec<T>,
}

fn ids_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

fn repeat_positions(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..len).collect()
}

fn key_mask_tensor<T: Real>(key_mask: &[T], batch: usize, tq: usize, tk: usize) -> Tensor<T> {
    Tensor::from_fn(&[batch, tq, tk], |idx| {
        let b = idx / (tq * tk);
        key_mask[b * tk + idx % tk]
    })
}

impl<T: Real> ModelParams<T> {
    fn linear(&self, tape: &mut Tape<T>, x: Var, w: ParamId) -> Result<Var> {
        let w = tape.param(&self.store, w);
        Ok(tape.matmul(x, w)?)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.store, n.gain);
        let b = tape.param(&self.store, n.bias);
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn attention(&self, tape: &mut Tape<T>, xq: Var, xkv: Var, p: &AttnParams, mask: &Tensor<T>) -> Result<Var> {
        let q = self.linear(tape, xq, p.wq)?;
        let k = self.linear(tape, xkv, p.wk)?;
        let v = self.linear(tape, xkv, p.wv)?;
        let a = tape.attention(q, k, v, mask, self.config.n_heads)?;
        self.linear(tape, a, p.wo)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, x: Var, p: &FfParams) -> Result<Var> {
        let h = self.linear(tape, x, p.w1)?;
        let h = tape.relu(h);
        self.linear(tape, h, p.w2)
    }

    fn embed_text(&self, tape: &mut Tape<T>, ids: &[u32], batch: usize, len: usize) -> Result<Var> {
        let table = tape.param(&self.store, self.layout.token_embed);
        let tok = tape.gather(table, &ids_usize(ids))?;
        let pos_table = tape.param(&self.store, self.layout.text_pos);
        let pos = tape.gather(pos_table, &repeat_positions(batch, len))?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs the encoder over `images [B, H, W, 3]` and the prompts.
    pub fn encode(&self, tape: &mut Tape<T>, images: &Tensor<T>, text: &TextInputs) -> Result<Encoded<T>> {
        let c = &self.config;
        let b = text.batch;
        let expect = [b, c.image_size, c.image_size, 3];
        if images.shape() != expect {
            return Err(ModelError::Shape(format!("images {:?}, expected {expect:?}", images.shape())));
        }
        let tp = text.prompt_len;
        if text.prompt_ids.len() != b * tp || text.prompt_mask.len() != b * tp {
            return Err(ModelError::Shape("prompt ids do not match batch × length".into()));
        }
        if tp > c.max_prompt_len {
            return Err(ModelError::Shape(format!("prompt length {tp} exceeds {}", c.max_prompt_len)));
        }
        let np = c.num_patches();
        let modality = tape.param(&self.store, self.layout.modality);

        let img = tape.constant(images.clone());
        let kernel = tape.param(&self.store, self.layout.patch_kernel);
        let patches = tape.conv_patchify(img, kernel, c.patch_size)?;
        let vpos_table = tape.param(&self.store, self.layout.vision_pos);
        let vpos = tape.gather(vpos_table, &repeat_positions(b, np))?;
        let vmod = tape.gather(modality, &vec![0; b * np])?;
        let vis = tape.add(patches, vpos)?;
        let vis = tape.add(vis, vmod)?;

        let txt = self.embed_text(tape, text.prompt_ids, b, tp)?;
        let tmod = tape.gather(modality, &vec![1; b * tp])?;
        let txt = tape.add(txt, tmod)?;

        let mut x = tape.concat_batched(vis, txt, b)?;
        let s = np + tp;
        let mut key_mask = vec![T::zero(); b * s];
        for bi in 0..b {
            for j in 0..tp {
                if !text.prompt_mask[bi * tp + j] {
                    key_mask[bi * s + np + j] = T::neg_infinity();
                }
            }
        }
        let mask = key_mask_tensor(&key_mask, b, s, s);
        for layer in &self.layout.encoder {
            let h = self.norm(tape, x, layer.norm_attn)?;
            let h = self.attention(tape, h, h, &layer.attn, &mask)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, x, layer.norm_ff)?;
            let h = self.feed_forward(tape, h, &layer.ff)?;
            x = tape.add(x, h)?;
        }
        let out = self.norm(tape, x, self.layout.encoder_norm)?;
        Ok(Encoded { out, batch: b, len: s, key_mask })
    }

    /// Decoder logits `[B·T, V]` for decoder inputs `[B, T]`.
    pub fn decode(&self, tape: &mut Tape<T>, enc: &Encoded<T>, dec_ids: &[u32], len: usize) -> Result<Var> {
        let b = enc.batch;
        if dec_ids.len() != b * len || len == 0 || len > self.config.max_target_len {
            return Err(ModelError::Shape(format!(
                "decoder input of {} ids for batch {b}, length {len}",
                dec_ids.len()
            )));
        }
        let mut y = self.embed_text(tape, dec_ids, b, len)?;
        let self_mask = causal_mask::<T>(b, len);
        let cross_mask = key_mask_tensor(&enc.key_mask, b, len, enc.len);
        for layer in &self.layout.decoder {
            let h = self.norm(tape, y, layer.norm_self)?;
            let h = self.attention(tape, h, h, &layer.self_attn, &self_mask)?;
            y = tape.add(y, h)?;
            let h = self.norm(tape, y, layer.norm_cross)?;
            let h = self.attention(tape, h, enc.out, &layer.cross_attn, &cross_mask)?;
            y = tape.add(y, h)?;
            let h = self.norm(tape, y, layer.norm_ff)?;
            let h = self.feed_forward(tape, h, &layer.ff)?;
            y = tape.add(y, h)?;
        }
        let y = self.norm(tape, y, self.layout.decoder_norm)?;
        let table = tape.param(&self.store, self.layout.token_embed);
        let proj = tape.transpose(table)?;
        Ok(tape.matmul(y, proj)?)
    }
}

/// Decoder inputs under teacher forcing: each row shifted right by one with
/// the pad id as start token.
pub fn shift_right(targets: &[u32], batch: usize, len: usize) -> Vec<u32> {
    let mut out = vec![PAD; batch * len];
    for b in 0..batch {
        out[b * len + 1..(b + 1) * len].copy_from_slice(&targets[b * len..(b + 1) * len - 1]);
    }
    out
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub loss: Var,
}

/// Teacher-forced forward pass and masked mean cross-entropy.
pub fn forward<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, batch: &Batch) -> Result<ForwardOutput> {
    let b = batch.batch_size();
    let images: Tensor<T> = batch.images.cast();
    let text = TextInputs {
        batch: b,
        prompt_ids: &batch.prompt_ids,
        prompt_mask: &batch.prompt_mask,
        prompt_len: batch.prompt_len,
    };
    let enc = params.encode(tape, &images, &text)?;
    let t = batch.target_len;
    let dec_in = shift_right(&batch.target_ids, b, t);
    let logits = params.decode(tape, &enc, &dec_in, t)?;
    let mask: Vec<T> = batch.loss_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let loss = tape.cross_entropy_masked(logits, &ids_usize(&batch.target_ids), &mask)?;
    Ok(ForwardOutput { logits, loss })
}

/// Mean token loss of each example, from logits already on the tape.
pub fn per_example_losses<T: Real>(tape: &Tape<T>, logits: Var, batch: &Batch) -> Vec<f64> {
    let l = tape.value(logits);
    let v = l.last_dim();
    let t = batch.target_len;
    (0..batch.batch_size())
        .map(|b| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for j in 0..t {
                let r = b * t + j;
                if !batch.loss_mask[r] {
                    continue;
                }
                let row: Vec<f64> = l.data()[r * v..(r + 1) * v].iter().map(|x| x.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                sum += lse - row[batch.target_ids[r] as usize];
                n += 1;
            }
            sum / n.max(1) as f64
        })
        .collect()
}

/// Greedy decoding for every example of a batch. Outputs stop before
/// end-of-sequence and never contain the pad id.
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    text: &TextInputs,
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    use super::vocab::EOS;
    let max_len = max_len.min(params.config.max_target_len);
    let b = text.batch;
    let mut tape = Tape::new();
    let enc = params.encode(&mut tape, images, text)?;
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let v = params.config.vocab_size;
    for step in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let len = step + 1;
        let mut dec_in = vec![PAD; b * len];
        for (bi, seq) in out.iter().enumerate() {
            for (j, &tok) in seq.iter().enumerate().take(step) {
                dec_in[bi * len + j + 1] = tok;
            }
        }
        let mark = tape.len();
        let logits = params.decode(&mut tape, &enc, &dec_in, len)?;
        let lv = tape.value(logits);
        for bi in 0..b {
            if done[bi] {
                continue;
            }
            let row = &lv.data()[(bi * len + step) * v..(bi * len + step + 1) * v];
            let mut best = EOS as usize;
            for (id, &x) in row.iter().enumerate() {
                if id != PAD as usize && x > row[best] {
                    best = id;
                }
            }
            if best == EOS as usize {
                done[bi] = true;
            } else {
                out[bi].push(best as u32);
            }
        }
        tape.truncate(mark);
    }
    Ok(out)
}
