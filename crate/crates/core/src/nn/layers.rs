use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::state::{AttnIx, EncoderLayerIx, LinearIx, ModelState, NormIx};
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// `true` marks a real token.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty token batch"));
        }
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::contract("empty token sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(crate::data::vocab::PAD, len - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch: seqs.len(),
            len,
        })
    }

    /// A batch with an explicit padding mask. Every row needs at least one
    /// real position.
    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>, batch: usize) -> Result<Self> {
        if batch == 0 || ids.len() != mask.len() || !ids.len().is_multiple_of(batch) || ids.is_empty() {
            return Err(Error::dim("ids and mask must be batch × len"));
        }
        let len = ids.len() / batch;
        if mask.chunks(len).any(|row| !row.contains(&true)) {
            return Err(Error::contract("sequence with no unpadded position"));
        }
        Ok(TokenBatch { ids, mask, batch, len })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.len)
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }
}

/// Source-encoder output for a batch: `states` is `B × L × d_model`.
#[derive(Clone, Debug)]
pub struct EncodedText {
    pub states: Var,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl EncodedText {
    pub fn lengths(&self) -> Vec<usize> {
        self.pad_mask
            .chunks(self.len)
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }
}

/// Image-encoder output: the class vector `B × d` and the patch vectors
/// `B × m × d`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub cls: Var,
    pub patches: Var,
}

/// One forward pass of the model recorded on a graph.
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    model: &'a ModelState,
    vars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Forward<'a> {
    /// Binds the model's parameters as leaves on `g`, without dropout.
    pub fn new(g: &'a mut Graph, model: &'a ModelState) -> Self {
        let vars = model.bind(g);
        Forward {
            g,
            model,
            vars,
            dropout: None,
        }
    }

    /// Enables dropout with masks drawn from a generator seeded by `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn model(&self) -> &ModelState {
        self.model
    }

    /// Parameter leaves in the model's table order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, ix: usize) -> Var {
        self.vars[ix]
    }

    fn drop(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some((p, rng)) => self.g.dropout(x, *p, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, ix: LinearIx) -> Result<Var> {
        let y = self.g.matmul(x, self.p(ix.w))?;
        self.g.add(y, self.p(ix.b))
    }

    fn norm(&mut self, x: Var, ix: NormIx) -> Result<Var> {
        let eps = self.model.config().ln_eps;
        self.g.layer_norm(x, self.p(ix.gain), self.p(ix.bias), eps)
    }

    /// `B × L × d` rows of the first `len` sinusoidal positions added to `x`.
    fn add_positions(&mut self, x: Var, len: usize) -> Result<Var> {
        let d = self.model.config().d_model;
        let pe = Tensor::from_parts(vec![len, d], self.model.positions.data()[..len * d].to_vec());
        let pe = self.g.constant(pe);
        self.g.add(x, pe)
    }

    /// Token embedding scaled by `√d_model` plus sinusoidal positions.
    pub fn embed_tokens(&mut self, tokens: &TokenBatch) -> Result<Var> {
        let cfg = self.model.config();
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        if let Some(&id) = tokens.ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocabulary { id, size: v });
        }
        if tokens.len > cfg.max_len {
            return Err(Error::Length {
                len: tokens.len,
                max: cfg.max_len,
            });
        }
        let rows = self.g.index_select(self.p(self.model.layout.tok_emb), &tokens.ids)?;
        let rows = self.g.reshape(rows, vec![tokens.batch, tokens.len, d])?;
        let scaled = self.g.scale(rows, (d as f64).sqrt());
        self.add_positions(scaled, tokens.len)
    }

    /// Multi-head scaled dot-product attention. `mask` is `B × Lq × Lk`
    /// with `true` for allowed (query, key) pairs. Returns the projected
    /// output `B × Lq × d` and the weights `B × H × Lq × Lk`.
    pub(crate) fn attention(&mut self, ix: AttnIx, query: Var, memory: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let cfg = self.model.config();
        let (h, dk) = (cfg.n_heads, cfg.d_k());
        let qs = self.g.shape(query).to_vec();
        let ks = self.g.shape(memory).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::dim(format!("attention over {qs:?} and {ks:?}")));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        if mask.len() != b * lq * lk {
            return Err(Error::dim("attention mask must be B × Lq × Lk"));
        }
        let split = |fw: &mut Self, x: Var, l: usize| -> Result<Var> {
            let x = fw.g.reshape(x, vec![b, l, h, dk])?;
            fw.g.permute(x, &[0, 2, 1, 3])
        };
        let q = self.linear(query, ix.q)?;
        let q = split(self, q, lq)?;
        let k = self.linear(memory, ix.k)?;
        let k = split(self, k, lk)?;
        let v = self.linear(memory, ix.v)?;
        let v = split(self, v, lk)?;
        let scores = self.g.matmul_nt(q, k)?;
        let scores = self.g.scale(scores, 1.0 / (dk as f64).sqrt());
        let mut full = Vec::with_capacity(b * h * lq * lk);
        for bi in 0..b {
            let m = &mask[bi * lq * lk..(bi + 1) * lq * lk];
            for _ in 0..h {
                full.extend_from_slice(m);
            }
        }
        let weights = self.g.masked_softmax(scores, 3, Some(&full))?;
        let ctx = self.g.matmul(weights, v)?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, vec![b, lq, h * dk])?;
        Ok((self.linear(ctx, ix.o)?, weights))
    }

    /// The multi-head attention block of source-encoder layer `layer`,
    /// applied to arbitrary queries and memory.
    pub fn encoder_attention(&mut self, layer: usize, query: Var, memory: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let ix = self
            .model
            .layout
            .enc
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no encoder layer {layer}")))?
            .attn;
        self.attention(ix, query, memory, mask)
    }

    fn feed_forward(&mut self, x: Var, ff_in: LinearIx, ff_out: LinearIx) -> Result<Var> {
        let hdn = self.linear(x, ff_in)?;
        let hdn = self.g.relu(hdn);
        self.linear(hdn, ff_out)
    }

    fn encoder_layer(&mut self, x: Var, ix: EncoderLayerIx, mask: &[bool]) -> Result<Var> {
        let h = self.norm(x, ix.ln_attn)?;
        let (a, _) = self.attention(ix.attn, h, h, mask)?;
        let a = self.drop(a);
        let x = self.g.add(x, a)?;
        let h = self.norm(x, ix.ln_ffn)?;
        let f = self.feed_forward(h, ix.ff_in, ix.ff_out)?;
        let f = self.drop(f);
        self.g.add(x, f)
    }

    /// Shared source encoder: the same parameters serve every language.
    pub fn encode_text(&mut self, tokens: &TokenBatch) -> Result<EncodedText> {
        let x = self.embed_tokens(tokens)?;
        let mut x = self.drop(x);
        let mask = key_mask(&tokens.mask, tokens.batch, tokens.len, tokens.len);
        for ix in self.model.layout.enc.clone() {
            x = self.encoder_layer(x, ix, &mask)?;
        }
        let states = self.norm(x, self.model.layout.enc_ln)?;
        Ok(EncodedText {
            states,
            pad_mask: tokens.mask.clone(),
            batch: tokens.batch,
            len: tokens.len,
        })
    }

    /// Patch encoder: tiles are projected, a class vector is prepended,
    /// positions are added and the image layers applied.
    pub fn encode_image(&mut self, images: &[&Image]) -> Result<EncodedImage> {
        let cfg = self.model.config().clone();
        if images.is_empty() {
            return Err(Error::contract("empty image batch"));
        }
        let mut flat = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
        for img in images {
            if img.side() != cfg.image_side {
                return Err(Error::dim(format!(
                    "image side {} but model expects {}",
                    img.side(),
                    cfg.image_side
                )));
            }
            flat.extend(img.patches(cfg.patch_side)?);
        }
        let (b, m, d) = (images.len(), cfg.n_patches(), cfg.d_model);
        let pix = self.g.constant(Tensor::from_parts(vec![b, m, cfg.patch_dim()], flat));
        let tiles = self.linear(pix, self.model.layout.patch_proj)?;
        let cls = self.g.reshape(self.p(self.model.layout.cls), vec![1, 1, d])?;
        let cls = self.g.index_select(cls, &vec![0; b])?;
        let x = self.g.concat(&[cls, tiles], 1)?;
        let x = self.add_positions(x, m + 1)?;
        let mut x = self.drop(x);
        let mask = vec![true; b * (m + 1) * (m + 1)];
        for ix in self.model.layout.img.clone() {
            x = self.encoder_layer(x, ix, &mask)?;
        }
        let v = self.norm(x, self.model.layout.img_ln)?;
        let cls = self.g.narrow(v, 1, 0, 1)?;
        let cls = self.g.reshape(cls, vec![b, d])?;
        let patches = self.g.narrow(v, 1, 1, m)?;
        Ok(EncodedImage { cls, patches })
    }

    /// Teacher-forced decoder: logits `B × T × V` for the next token at
    /// every position of `target_in`.
    pub fn decode(&mut self, target_in: &TokenBatch, memory: &EncodedText) -> Result<Var> {
        if target_in.batch != memory.batch {
            return Err(Error::dim("decoder and encoder batch sizes differ"));
        }
        let (b, t, s) = (target_in.batch, target_in.len, memory.len);
        let x = self.embed_tokens(target_in)?;
        let mut x = self.drop(x);
        let mut self_mask = key_mask(&target_in.mask, b, t, t);
        for bi in 0..b {
            for i in 0..t {
                for j in i + 1..t {
                    self_mask[(bi * t + i) * t + j] = false;
                }
            }
        }
        let cross_mask = key_mask(&memory.pad_mask, b, t, s);
        for ix in self.model.layout.dec.clone() {
            let h = self.norm(x, ix.ln_self)?;
            let (a, _) = self.attention(ix.self_attn, h, h, &self_mask)?;
            let a = self.drop(a);
            x = self.g.add(x, a)?;
            let h = self.norm(x, ix.ln_cross)?;
            let (c, _) = self.attention(ix.cross_attn, h, memory.states, &cross_mask)?;
            let c = self.drop(c);
            x = self.g.add(x, c)?;
            let h = self.norm(x, ix.ln_ffn)?;
            let f = self.feed_forward(h, ix.ff_in, ix.ff_out)?;
            let f = self.drop(f);
            x = self.g.add(x, f)?;
        }
        let x = self.norm(x, self.model.layout.dec_ln)?;
        self.g.matmul(x, self.p(self.model.layout.out_proj))
    }

    /// Next-token logits `K × V` for `K` equal-length prefixes that all
    /// start with the beginning-of-sequence token. `memory` holds either one
    /// encoded sentence (shared by every prefix) or `K`.
    pub fn decode_step(&mut self, prefixes: &[Vec<usize>], memory: &EncodedText) -> Result<Var> {
        let k = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if k == 0 || t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::contract("decode_step needs equal-length non-empty prefixes"));
        }
        if prefixes.iter().any(|p| p[0] != crate::data::vocab::BOS) {
            return Err(Error::contract("prefix must start with the BOS token"));
        }
        let max = self.model.config().max_len;
        if t > max {
            return Err(Error::Length { len: t, max });
        }
        let memory = match memory.batch {
            n if n == k => memory.clone(),
            1 => {
                let states = self.g.index_select(memory.states, &vec![0; k])?;
                EncodedText {
                    states,
                    pad_mask: memory.pad_mask.repeat(k),
                    batch: k,
                    len: memory.len,
                }
            }
            n => return Err(Error::dim(format!("{n} encoded sentences for {k} prefixes"))),
        };
        let target = TokenBatch::new(prefixes)?;
        let logits = self.decode(&target, &memory)?;
        let last = self.g.narrow(logits, 1, t - 1, 1)?;
        let v = self.model.config().vocab_size;
        self.g.reshape(last, vec![k, v])
    }

    /// Single-head attention with text states as queries and image patches
    /// as keys and values: `softmax((w W_Q)(v W_K)ᵀ / √d_k)(v W_V)`.
    /// Returns the grounded vectors `B × L × d` and weights `B × L × m`.
    pub fn selective_attention(&mut self, text: &EncodedText, patches: Var) -> Result<(Var, Var)> {
        let ps = self.g.shape(patches).to_vec();
        if ps.len() != 3 || ps[0] != text.batch || ps[1] == 0 {
            return Err(Error::dim(format!("patches {ps:?} for a text batch of {}", text.batch)));
        }
        let layout = &self.model.layout;
        let (wq, wk, wv) = (self.p(layout.sel_q), self.p(layout.sel_k), self.p(layout.sel_v));
        let q = self.g.matmul(text.states, wq)?;
        let k = self.g.matmul(patches, wk)?;
        let v = self.g.matmul(patches, wv)?;
        let scores = self.g.matmul_nt(q, k)?;
        let dk = self.model.config().d_k() as f64;
        let scores = self.g.scale(scores, 1.0 / dk.sqrt());
        let weights = self.g.softmax(scores, 2)?;
        let out = self.g.matmul(weights, v)?;
        Ok((out, weights))
    }
}

/// Expands a `B × Lk` key padding mask to `B × Lq × Lk`.
fn key_mask(keys: &[bool], b: usize, lq: usize, lk: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(b * lq * lk);
    for bi in 0..b {
        let row = &keys[bi * lk..(bi + 1) * lk];
        for _ in 0..lq {
            out.extend_from_slice(row);
        }
    }
    out
}
