//! Two-stage training, few-shot finetuning and checkpoint handling.

mod batch;
mod loss;
mod optim;
mod run;

pub use batch::{make_batches, Batch, Prepared};
pub use loss::{batch_loss, stage1_loss, stage2_loss, Components, LossParts, Stage};
pub use optim::{adam_step, lr_at, AdamConfig, OptimizerState};
pub use run::{
    average_checkpoints, checkpoint_path, finetune, latest_checkpoint, sample_pairs, train, LogRecord, TrainOutcome,
    LOG_HEADER,
};

use crate::error::{Error, Result};
use crate::objectives::ContrastConfig;

/// Which of the three compared systems a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Cross-entropy on the high-resource pairs only.
    Baseline,
    /// Adds sentence-level image contrast.
    SCtr,
    /// Sentence-level contrast, then token-level contrast in the second half.
    STCtr,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Mode::Baseline),
            "s-ctr" => Some(Mode::SCtr),
            "s+t-ctr" => Some(Mode::STCtr),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::SCtr => "s-ctr",
            Mode::STCtr => "s+t-ctr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub contrast: ContrastConfig,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub batch_tokens: usize,
    pub stage_split_fraction: f64,
    pub label_smoothing: f64,
    pub dropout_p: f64,
    pub seed: u64,
    pub checkpoint_avg_k: usize,
    pub use_l2_loss: bool,
    /// Writes elapsed wall time into the log's `seconds` column. Off by
    /// default so logs are byte-reproducible.
    pub record_wall_time: bool,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            contrast: ContrastConfig::default(),
            lr_peak: 5e-4,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            max_epochs: 30,
            batch_tokens: 1600,
            stage_split_fraction: 0.5,
            label_smoothing: 0.1,
            dropout_p: 0.1,
            seed: 1,
            checkpoint_avg_k: 5,
            use_l2_loss: false,
            record_wall_time: false,
            finetune_epochs: 30,
            finetune_batch: 20,
            finetune_lr: 1e-4,
        }
    }
}

impl TrainConfig {
    /// Applies a mode's loss weights: the baseline zeroes both, `s-ctr`
    /// zeroes the token-level weight.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        match mode {
            Mode::Baseline => {
                self.contrast.lambda_s = 0.0;
                self.contrast.lambda_t = 0.0;
            }
            Mode::SCtr => self.contrast.lambda_t = 0.0,
            Mode::STCtr => {}
        }
        self
    }

    /// Index of the first epoch trained with the stage-2 objective.
    pub fn split_epoch(&self) -> usize {
        ((self.max_epochs as f64) * self.stage_split_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.stage_split_fraction > 0.0 && self.stage_split_fraction < 1.0) {
            return fail("stage_split_fraction must lie in (0, 1)");
        }
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1");
        }
        if [self.lr_peak, self.finetune_lr]
            .iter()
            .any(|&lr| lr.is_nan() || lr <= 0.0)
        {
            return fail("learning rates must be positive");
        }
        if self.batch_tokens == 0 || self.finetune_batch == 0 {
            return fail("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout_p) {
            return fail("label_smoothing and dropout_p must lie in [0, 1)");
        }
        if self.checkpoint_avg_k == 0 {
            return fail("checkpoint_avg_k must be at least 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return fail("invalid Adam hyper-parameters");
        }
        Ok(())
    }
}
