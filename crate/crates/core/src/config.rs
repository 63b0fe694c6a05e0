//! Plain-text run configuration: `key = value` lines, `#` comments and
//! dotted keys.
//!
//! ```
//! use pivot_align::config::RunConfig;
//!
//! let cfg = RunConfig::parse("seed = 7\ntrain.max_epochs = 3 # short run\n").unwrap();
//! assert_eq!(cfg.train.max_epochs, 3);
//! assert_eq!(cfg.train.seed, 7);
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{CorpusSpec, LanguageSpec, WordOrder};
use crate::error::{Error, Result};
use crate::eval::DecodeConfig;
use crate::nn::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "PIVOT_ALIGN_SEED";

/// Sizes of the evaluation protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Test sentences decoded per language for BLEU.
    pub test_limit: usize,
    /// Image–caption pairs ranked for retrieval recall.
    pub retrieval_n: usize,
    /// Sentences per language in the representation export.
    pub repr_per_lang: usize,
    /// Test samples per low-resource language in the attention export.
    pub attn_samples: usize,
    pub fewshot_pairs: usize,
    pub fewshot_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_limit: 500,
            retrieval_n: 200,
            repr_per_lang: 100,
            attn_samples: 100,
            fewshot_pairs: 100,
            fewshot_seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 1;
        RunConfig {
            seed,
            corpus: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses a configuration; unspecified keys keep their defaults and
    /// unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A scaled-down preset that trains in seconds; used by the examples
    /// and tests.
    pub fn small() -> Self {
        let text = "\
data.n_train_high = 300
data.n_train_low = 300
data.n_test = 60
data.n_fewshot = 40
model.n_enc_layers = 1
model.n_dec_layers = 1
model.n_img_layers = 1
train.max_epochs = 30
train.lr_peak = 1e-3
train.batch_tokens = 400
train.warmup_steps = 20
train.checkpoint_avg_k = 2
train.finetune_epochs = 10
train.finetune_batch = 10
eval.test_limit = 60
eval.retrieval_n = 40
eval.repr_per_lang = 30
eval.attn_samples = 20
eval.fewshot_pairs = 20
eval.fewshot_seeds = 2
";
        RunConfig::parse(text).expect("preset parses")
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, c) = (&mut self.model, &mut self.train, &mut self.corpus);
        match key {
            "seed" => self.set_seed(value(key, v)?),
            "data.n_train_high" => c.n_train_high = value(key, v)?,
            "data.n_train_low" => c.n_train_low = value(key, v)?,
            "data.n_test" => c.n_test = value(key, v)?,
            "data.n_fewshot" => c.n_fewshot = value(key, v)?,
            "data.caption_dropout" => c.caption_dropout = value(key, v)?,
            "model.d_model" => m.d_model = value(key, v)?,
            "model.n_heads" => m.n_heads = value(key, v)?,
            "model.d_ffn" => m.d_ffn = value(key, v)?,
            "model.n_enc_layers" => m.n_enc_layers = value(key, v)?,
            "model.n_dec_layers" => m.n_dec_layers = value(key, v)?,
            "model.n_img_layers" => m.n_img_layers = value(key, v)?,
            "model.patch_side" => m.patch_side = value(key, v)?,
            "model.max_len" => m.max_len = value(key, v)?,
            "model.ln_eps" => m.ln_eps = value(key, v)?,
            "model.dropout_p" | "train.dropout_p" => {
                t.dropout_p = value(key, v)?;
                m.dropout_p = t.dropout_p;
            }
            "contrast.tau_s" => t.contrast.tau_s = value(key, v)?,
            "contrast.tau_t" => t.contrast.tau_t = value(key, v)?,
            "contrast.lambda_s" => t.contrast.lambda_s = value(key, v)?,
            "contrast.lambda_t" => t.contrast.lambda_t = value(key, v)?,
            "contrast.include_target_contrast" => t.contrast.include_target_contrast = flag(key, v)?,
            "train.lr_peak" => t.lr_peak = value(key, v)?,
            "train.warmup_steps" => t.warmup_steps = value(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = value(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = value(key, v)?,
            "train.adam_eps" => t.adam.eps = value(key, v)?,
            "train.max_epochs" => t.max_epochs = value(key, v)?,
            "train.batch_tokens" => t.batch_tokens = value(key, v)?,
            "train.stage_split_fraction" => t.stage_split_fraction = value(key, v)?,
            "train.label_smoothing" => t.label_smoothing = value(key, v)?,
            "train.checkpoint_avg_k" => t.checkpoint_avg_k = value(key, v)?,
            "train.use_l2_loss" => t.use_l2_loss = flag(key, v)?,
            "train.record_wall_time" => t.record_wall_time = flag(key, v)?,
            "train.finetune_epochs" => t.finetune_epochs = value(key, v)?,
            "train.finetune_batch" => t.finetune_batch = value(key, v)?,
            "train.finetune_lr" => t.finetune_lr = value(key, v)?,
            "decode.beam_size" => self.decode.beam_size = value(key, v)?,
            "decode.max_decode_len" => self.decode.max_decode_len = value(key, v)?,
            "decode.length_penalty" => self.decode.length_penalty = value(key, v)?,
            "eval.test_limit" => self.eval.test_limit = value(key, v)?,
            "eval.retrieval_n" => self.eval.retrieval_n = value(key, v)?,
            "eval.repr_per_lang" => self.eval.repr_per_lang = value(key, v)?,
            "eval.attn_samples" => self.eval.attn_samples = value(key, v)?,
            "eval.fewshot_pairs" => self.eval.fewshot_pairs = value(key, v)?,
            "eval.fewshot_seeds" => self.eval.fewshot_seeds = value(key, v)?,
            _ => {
                if let Some(tag) = key.strip_prefix("data.order.") {
                    let order = WordOrder::parse(v)
                        .ok_or_else(|| Error::Config(format!("{key}: expected color-shape or shape-color")))?;
                    let lang = self
                        .languages_mut()
                        .find(|l| l.tag == tag)
                        .ok_or_else(|| Error::Config(format!("unknown language {tag:?}")))?;
                    lang.order = order;
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    fn languages_mut(&mut self) -> impl Iterator<Item = &mut LanguageSpec> {
        let c = &mut self.corpus;
        std::iter::once(&mut c.high)
            .chain(c.low.iter_mut())
            .chain(std::iter::once(&mut c.target))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
    }

    /// Applies `PIVOT_ALIGN_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set_seed(value(SEED_ENV, v.trim())?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        let m = ModelConfig {
            vocab_size: self.model.vocab_size.max(5),
            ..self.model.clone()
        };
        m.validate()?;
        if m.image_side != crate::data::scene::IMAGE_SIDE {
            return Err(Error::Config(format!(
                "model.image_side must be {}",
                crate::data::scene::IMAGE_SIDE
            )));
        }
        let e = &self.eval;
        if e.test_limit == 0 || e.retrieval_n < 2 || e.repr_per_lang < 2 || e.fewshot_seeds == 0 {
            return Err(Error::Config("evaluation sizes are too small".into()));
        }
        Ok(())
    }

    /// The model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dropout_p: self.train.dropout_p,
            ..self.model.clone()
        }
    }

    /// Every key with its current value, in a form [`RunConfig::parse`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let (m, t, c, d, e) = (&self.model, &self.train, &self.corpus, &self.decode, &self.eval);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data.n_train_high", c.n_train_high.to_string());
        kv("data.n_train_low", c.n_train_low.to_string());
        kv("data.n_test", c.n_test.to_string());
        kv("data.n_fewshot", c.n_fewshot.to_string());
        kv("data.caption_dropout", c.caption_dropout.to_string());
        for l in std::iter::once(&c.high).chain(&c.low).chain(std::iter::once(&c.target)) {
            kv(&format!("data.order.{}", l.tag), l.order.as_str().to_string());
        }
        kv("model.d_model", m.d_model.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.d_ffn", m.d_ffn.to_string());
        kv("model.n_enc_layers", m.n_enc_layers.to_string());
        kv("model.n_dec_layers", m.n_dec_layers.to_string());
        kv("model.n_img_layers", m.n_img_layers.to_string());
        kv("model.patch_side", m.patch_side.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("model.ln_eps", m.ln_eps.to_string());
        kv("contrast.tau_s", t.contrast.tau_s.to_string());
        kv("contrast.tau_t", t.contrast.tau_t.to_string());
        kv("contrast.lambda_s", t.contrast.lambda_s.to_string());
        kv("contrast.lambda_t", t.contrast.lambda_t.to_string());
        kv(
            "contrast.include_target_contrast",
            t.contrast.include_target_contrast.to_string(),
        );
        kv("train.lr_peak", t.lr_peak.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.adam_beta1", t.adam.beta1.to_string());
        kv("train.adam_beta2", t.adam.beta2.to_string());
        kv("train.adam_eps", t.adam.eps.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.batch_tokens", t.batch_tokens.to_string());
        kv("train.stage_split_fraction", t.stage_split_fraction.to_string());
        kv("train.label_smoothing", t.label_smoothing.to_string());
        kv("train.dropout_p", t.dropout_p.to_string());
        kv("train.checkpoint_avg_k", t.checkpoint_avg_k.to_string());
        kv("train.use_l2_loss", t.use_l2_loss.to_string());
        kv("train.record_wall_time", t.record_wall_time.to_string());
        kv("train.finetune_epochs", t.finetune_epochs.to_string());
        kv("train.finetune_batch", t.finetune_batch.to_string());
        kv("train.finetune_lr", t.finetune_lr.to_string());
        kv("decode.beam_size", d.beam_size.to_string());
        kv("decode.max_decode_len", d.max_decode_len.to_string());
        kv("decode.length_penalty", d.length_penalty.to_string());
        kv("eval.test_limit", e.test_limit.to_string());
        kv("eval.retrieval_n", e.retrieval_n.to_string());
        kv("eval.repr_per_lang", e.repr_per_lang.to_string());
        kv("eval.attn_samples", e.attn_samples.to_string());
        kv("eval.fewshot_pairs", e.fewshot_pairs.to_string());
        kv("eval.fewshot_seeds", e.fewshot_seeds.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.train.max_epochs = 3;
        cfg.train.contrast.tau_s = 0.05;
        cfg.corpus.low[0].order = WordOrder::ColorShape;
        cfg.set_seed(9);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        for bad in [
            "seed 3",
            "nope = 1",
            "train.max_epochs = x",
            "train.use_l2_loss = maybe",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::parse("train.stage_split_fraction = 1.0").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\n  contrast.lambda_s = 2 # weight\n").unwrap();
        assert_eq!(cfg.train.contrast.lambda_s, 2.0);
    }
}
