use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batches, Batch, Prepared};
use super::loss::{batch_loss, Components, Stage};
use super::optim::{adam_step, lr_at, OptimizerState};
use super::TrainConfig;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::{average_tables, Forward, ModelConfig, ModelState, ParamTable};
use crate::tensor::{Graph, Tensor};

pub const LOG_HEADER: &str = "step,stage,ce,s_ctr,t_ctr,l2,lr,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    pub components: Components,
    pub lr: f64,
    pub seconds: f64,
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.stage.as_str(),
            c.ce,
            c.s_ctr,
            c.t_ctr,
            c.l2,
            self.lr,
            self.seconds
        )
    }
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    pub records: Vec<LogRecord>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-{epoch}.pvck"))
}

/// The highest-numbered `ckpt-<epoch>.pvck` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("ckpt-")?.strip_suffix(".pvck")?.parse().ok()?;
            Some((epoch, dir.join(name)))
        })
        .max_by_key(|(e, _)| *e)
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one forward/backward pass and applies Adam.
fn optimize_step(
    state: &mut ModelState,
    opt: &mut OptimizerState,
    data: &Prepared,
    batch: &Batch,
    cfg: &TrainConfig,
    stage: Stage,
    lr: f64,
) -> Result<Components> {
    let mut g = Graph::new();
    let dropout_seed = mix(cfg.seed, 0x1_0000_0000 + opt.step);
    let (loss, comp, vars) = {
        let mut fw = Forward::new(&mut g, state).with_dropout(cfg.dropout_p, dropout_seed);
        let parts = batch_loss(&mut fw, data, batch, cfg, stage)?;
        (parts.fine, parts.components, fw.param_vars().to_vec())
    };
    let total = g.value(loss).item();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss {total} at step {}", opt.step + 1)));
    }
    g.backward(loss)?;
    let zeros: Vec<Vec<f64>> = state.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let grads: Vec<&[f64]> = vars
        .iter()
        .zip(&zeros)
        .map(|(&v, z)| g.grad(v).unwrap_or(z.as_slice()))
        .collect();
    adam_step(state.params_mut(), opt, &grads, lr, &cfg.adam)?;
    Ok(comp)
}

fn save_checkpoint(path: &Path, state: &ModelState, opt: &OptimizerState, epoch: usize) -> Result<()> {
    let mut table = state.to_table();
    opt.append_to(state.names(), &mut table);
    table.push("train/epoch", Tensor::scalar(epoch as f64));
    table.save(path)
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_log(text: &str) -> Vec<LogRecord> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return None;
            }
            let stage = match f[1] {
                "1" => Stage::One,
                "2" => Stage::Two,
                "finetune" => Stage::Finetune,
                _ => return None,
            };
            Some(LogRecord {
                step: f[0].parse().ok()?,
                stage,
                components: Components {
                    ce: f[2].parse().ok()?,
                    s_ctr: f[3].parse().ok()?,
                    t_ctr: f[4].parse().ok()?,
                    l2: f[5].parse().ok()?,
                },
                lr: f[6].parse().ok()?,
                seconds: f[7].parse().ok()?,
            })
        })
        .collect()
}

/// Trains from scratch, or from the newest checkpoint in `out_dir` when
/// `resume` is set. Epochs before the stage split optimize the stage-1
/// objective, later ones the stage-2 objective. Writes `ckpt-<epoch>.pvck`
/// after every epoch and `train_log.csv` alongside. `progress` sees every
/// log record as it is produced.
pub fn train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.vocab_size != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} but corpus vocabulary {}",
            model_cfg.vocab_size,
            corpus.vocab.len()
        )));
    }
    let problems = corpus.audit();
    if !problems.is_empty() {
        return Err(Error::Data(format!("corpus audit failed: {}", problems.join("; "))));
    }
    let data = Prepared::new(corpus, model_cfg.max_len)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");

    let mut state = ModelState::init(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(state.params());
    let mut start_epoch = 0;
    let mut records = Vec::new();
    if resume {
        if let Some((epoch, path)) = latest_checkpoint(out_dir) {
            let table = ParamTable::load(&path)?;
            state = ModelState::from_table(model_cfg, &table)?;
            opt = OptimizerState::from_table(state.names(), state.params(), &table)?;
            start_epoch = epoch;
            if let Ok(text) = fs::read_to_string(&log_path) {
                records = parse_log(&text);
                records.retain(|r| r.step <= opt.step);
            }
        }
    }

    let clock = Instant::now();
    let split = cfg.split_epoch();
    let mut checkpoints: Vec<PathBuf> = (1..=start_epoch).map(|e| checkpoint_path(out_dir, e)).collect();
    for epoch in start_epoch..cfg.max_epochs {
        let stage = if epoch < split { Stage::One } else { Stage::Two };
        for batch in make_batches(&data, cfg.batch_tokens, mix(cfg.seed, epoch as u64)) {
            let lr = lr_at(opt.step + 1, cfg.lr_peak, cfg.warmup_steps);
            let components = optimize_step(&mut state, &mut opt, &data, &batch, cfg, stage, lr)?;
            let rec = LogRecord {
                step: opt.step,
                stage,
                components,
                lr,
                seconds: if cfg.record_wall_time {
                    clock.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            progress(&rec);
            records.push(rec);
        }
        let path = checkpoint_path(out_dir, epoch + 1);
        save_checkpoint(&path, &state, &opt, epoch + 1)?;
        write_log(&log_path, &records)?;
        checkpoints.push(path);
    }
    if checkpoints.is_empty() {
        write_log(&log_path, &records)?;
    }
    Ok(TrainOutcome {
        state,
        checkpoints,
        log: log_path,
        records,
    })
}

/// Draws `n` distinct samples from the few-shot pool of `lang`.
pub fn sample_pairs(corpus: &Corpus, lang: &str, n: usize, seed: u64) -> Result<Vec<usize>> {
    let pool = corpus.select(lang, Split::Valid);
    if n == 0 {
        return Err(Error::Config("few-shot pair count must be positive".into()));
    }
    if n > pool.len() {
        return Err(Error::Config(format!(
            "{n} pairs requested but the {lang} pool holds {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Continues training on parallel pairs with cross-entropy only, using a
/// fresh optimizer at a constant learning rate.
pub fn finetune(
    start: &ModelState,
    corpus: &Corpus,
    pairs: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, Vec<LogRecord>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("finetuning needs at least one parallel pair".into()));
    }
    let data = Prepared::new(corpus, start.config().max_len)?;
    if pairs.iter().any(|&i| data.tgt.get(i).is_none_or(Option::is_none)) {
        return Err(Error::Config("finetuning pairs must carry references".into()));
    }
    let mut state = start.clone();
    let mut opt = OptimizerState::new(state.params());
    let mut records = Vec::new();
    let ft_cfg = TrainConfig {
        seed: mix(cfg.seed, seed),
        ..cfg.clone()
    };
    let mut order = pairs.to_vec();
    for epoch in 0..cfg.finetune_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(ft_cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.finetune_batch) {
            let batch = Batch {
                parallel: chunk.to_vec(),
                captions: Vec::new(),
            };
            let lr = cfg.finetune_lr;
            let components = optimize_step(&mut state, &mut opt, &data, &batch, &ft_cfg, Stage::Finetune, lr)?;
            records.push(LogRecord {
                step: opt.step,
                stage: Stage::Finetune,
                components,
                lr,
                seconds: 0.0,
            });
        }
    }
    Ok((state, records))
}

/// Loads checkpoints and averages their model parameters; optimizer and
/// bookkeeping entries are dropped.
pub fn average_checkpoints(paths: &[PathBuf], config: &ModelConfig) -> Result<ModelState> {
    if paths.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to average".into()));
    }
    let names = ModelState::init(config, 0)?.names().to_vec();
    let mut tables = Vec::with_capacity(paths.len());
    for p in paths {
        let full = ParamTable::load(p)?;
        let mut t = ParamTable::new();
        for n in &names {
            let v = full
                .get(n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: parameter {n} missing", p.display())))?;
            t.push(n.clone(), v.clone());
        }
        tables.push(t);
    }
    ModelState::from_table(config, &average_tables(&tables)?)
}
