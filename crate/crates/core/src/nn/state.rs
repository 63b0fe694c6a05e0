use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::ParamTable;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIx {
    pub q: LinearIx,
    pub k: LinearIx,
    pub v: LinearIx,
    pub o: LinearIx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayerIx {
    pub ln_attn: NormIx,
    pub attn: AttnIx,
    pub ln_ffn: NormIx,
    pub ff_in: LinearIx,
    pub ff_out: LinearIx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayerIx {
    pub ln_self: NormIx,
    pub self_attn: AttnIx,
    pub ln_cross: NormIx,
    pub cross_attn: AttnIx,
    pub ln_ffn: NormIx,
    pub ff_in: LinearIx,
    pub ff_out: LinearIx,
}

/// Positions of every parameter inside [`ModelState`]'s flat table.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub enc: Vec<EncoderLayerIx>,
    pub enc_ln: NormIx,
    pub dec: Vec<DecoderLayerIx>,
    pub dec_ln: NormIx,
    pub out_proj: usize,
    pub patch_proj: LinearIx,
    pub cls: usize,
    pub img: Vec<EncoderLayerIx>,
    pub img_ln: NormIx,
    pub sel_q: usize,
    pub sel_k: usize,
    pub sel_v: usize,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.add(name, Tensor::from_parts(vec![fan_in, fan_out], data))
    }

    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.add(name, Tensor::from_parts(shape, data))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIx {
        let w = self.xavier(format!("{name}.w"), fan_in, fan_out);
        let b = self.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        LinearIx { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIx {
        let gain = self.add(format!("{name}.gain"), Tensor::ones(vec![d]));
        let bias = self.add(format!("{name}.bias"), Tensor::zeros(vec![d]));
        NormIx { gain, bias }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIx {
        AttnIx {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> EncoderLayerIx {
        let d = cfg.d_model;
        EncoderLayerIx {
            ln_attn: self.norm(&format!("{name}.ln_attn"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), d),
            ff_in: self.linear(&format!("{name}.ff_in"), d, cfg.d_ffn),
            ff_out: self.linear(&format!("{name}.ff_out"), cfg.d_ffn, d),
        }
    }
}

/// Every learnable parameter of the image encoder, source encoder, target
/// decoder and selective-attention projections, in one ordered table.
///
/// The source encoder and its token embedding are a single parameter set
/// used for every language.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) layout: Layout,
    pub(crate) positions: Tensor,
}

impl ModelState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let tok_emb = b.normal("embed.tokens".into(), vec![config.vocab_size, d], (d as f64).powf(-0.5));
        let enc = (0..config.n_enc_layers)
            .map(|i| b.encoder_layer(&format!("encoder.{i}"), config))
            .collect();
        let enc_ln = b.norm("encoder.ln", d);
        let dec = (0..config.n_dec_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayerIx {
                    ln_self: b.norm(&format!("{name}.ln_self"), d),
                    self_attn: b.attn(&format!("{name}.self_attn"), d),
                    ln_cross: b.norm(&format!("{name}.ln_cross"), d),
                    cross_attn: b.attn(&format!("{name}.cross_attn"), d),
                    ln_ffn: b.norm(&format!("{name}.ln_ffn"), d),
                    ff_in: b.linear(&format!("{name}.ff_in"), d, config.d_ffn),
                    ff_out: b.linear(&format!("{name}.ff_out"), config.d_ffn, d),
                }
            })
            .collect();
        let dec_ln = b.norm("decoder.ln", d);
        let out_proj = b.xavier("decoder.out_proj".into(), d, config.vocab_size);
        let patch_proj = b.linear("image.patch_proj", config.patch_dim(), d);
        let cls = b.normal("image.cls".into(), vec![d], (d as f64).powf(-0.5));
        let img = (0..config.n_img_layers)
            .map(|i| b.encoder_layer(&format!("image.{i}"), config))
            .collect();
        let img_ln = b.norm("image.ln", d);
        let sel_q = b.xavier("select.w_q".into(), d, d);
        let sel_k = b.xavier("select.w_k".into(), d, d);
        let sel_v = b.xavier("select.w_v".into(), d, d);
        let layout = Layout {
            tok_emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_proj,
            patch_proj,
            cls,
            img,
            img_ln,
            sel_q,
            sel_k,
            sel_v,
        };
        let (names, params) = (b.names, b.tensors);
        Ok(ModelState {
            positions: sinusoid_table(config.max_len.max(config.n_patches() + 1), d),
            config: config.clone(),
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a gradient-carrying leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn to_table(&self) -> ParamTable {
        let mut t = ParamTable::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            t.push(n.clone(), p.clone());
        }
        t
    }

    /// Rebuilds a model for `config` from a parameter table; every
    /// parameter must be present with the expected shape. Entries the model
    /// does not own (such as optimizer state) are ignored.
    pub fn from_table(config: &ModelConfig, table: &ParamTable) -> Result<Self> {
        let mut state = ModelState::init(config, 0)?;
        for (name, slot) in state.names.iter().zip(state.params.iter_mut()) {
            let t = table
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(state)
    }
}

/// Sinusoidal position encodings, `rows × d`.
pub(crate) fn sinusoid_table(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let freq = (-(10000f64.ln()) * (2 * i) as f64 / d as f64).exp();
            data[pos * d + 2 * i] = (pos as f64 * freq).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::from_parts(vec![rows, d], data)
}
