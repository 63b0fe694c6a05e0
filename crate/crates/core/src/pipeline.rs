//! End-to-end experiment steps shared by the command-line tool, the
//! examples and the acceptance suite.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{build_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{
    attention_grounding, export_attention, export_sentence_reprs, test_bleu, test_recall, BleuRow, EvalReport,
    RecallRow,
};
use crate::nn::{ModelConfig, ModelState};
use crate::train::{self, finetune, sample_pairs, Mode, TrainConfig, TrainOutcome};

/// Progress sink; pass `&mut std::io::sink()` to silence.
pub type Progress<'a> = &'a mut dyn Write;

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Drops the (image, target caption) contrast group.
    NoTarget,
    /// Replaces the contrastive terms with squared distances.
    L2,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no-target" => Some(Ablation::NoTarget),
            "l2" => Some(Ablation::L2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoTarget => "no-target",
            Ablation::L2 => "l2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Translate,
    Retrieve,
    Attn,
    Reprs,
}

impl EvalTask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translate" => Some(EvalTask::Translate),
            "retrieve" => Some(EvalTask::Retrieve),
            "attn" => Some(EvalTask::Attn),
            "reprs" => Some(EvalTask::Reprs),
            _ => None,
        }
    }
}

/// Training configuration for a mode and set of ablations.
pub fn train_config(cfg: &RunConfig, mode: Mode, ablations: &[Ablation]) -> TrainConfig {
    let mut t = cfg.train.clone().with_mode(mode);
    for a in ablations {
        match a {
            Ablation::NoTarget => t.contrast.include_target_contrast = false,
            Ablation::L2 => t.use_l2_loss = true,
        }
    }
    t
}

/// SHA-256 over the corpus files: samples, languages, vocabulary and every
/// image in sample order.
pub fn corpus_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut feed = |p: PathBuf| -> Result<()> {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    let samples = root.join("corpus").join("samples.jsonl");
    feed(samples.clone())?;
    feed(root.join("corpus").join("languages.json"))?;
    feed(root.join("vocab.txt"))?;
    let text = fs::read_to_string(&samples).map_err(|e| Error::io(&samples, e))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let s: crate::data::CorpusSample =
            serde_json::from_str(line).map_err(|e| Error::format(&samples, e.to_string()))?;
        feed(root.join(&s.image))?;
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Generates the corpus into `out` and returns it with its hash.
pub fn gen(cfg: &RunConfig, out: &Path, progress: Progress) -> Result<(Corpus, String)> {
    cfg.validate()?;
    let corpus = build_corpus(&cfg.corpus)?;
    let problems = corpus.audit();
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "generated corpus fails its audit: {}",
            problems.join("; ")
        )));
    }
    corpus.write(out)?;
    let hash = corpus_hash(out)?;
    say!(progress, "{}", corpus.counts_table().trim_end());
    say!(progress, "vocabulary: {} tokens", corpus.vocab.len());
    say!(progress, "corpus hash: {hash}");
    Ok((corpus, hash))
}

pub fn model_config(cfg: &RunConfig, corpus: &Corpus) -> ModelConfig {
    cfg.model_for(corpus.vocab.len())
}

/// Trains one system into `out`.
pub fn train_run(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    mode: Mode,
    ablations: &[Ablation],
    resume: bool,
    progress: Progress,
) -> Result<TrainOutcome> {
    let tcfg = train_config(cfg, mode, ablations);
    let mcfg = model_config(cfg, corpus);
    let clock = Instant::now();
    let per_epoch =
        train::make_batches(&train::Prepared::new(corpus, mcfg.max_len)?, tcfg.batch_tokens, 0).len() as u64;
    let outcome = train::train(corpus, &mcfg, &tcfg, out, resume, |r| {
        if r.step % per_epoch == 0 {
            let c = &r.components;
            say!(
                progress,
                "  epoch {:>3} stage {:<8} ce {:.4} s_ctr {:.4} t_ctr {:.4} l2 {:.4} ({:.0}s)",
                r.step / per_epoch,
                r.stage.as_str(),
                c.ce,
                c.s_ctr,
                c.t_ctr,
                c.l2,
                clock.elapsed().as_secs_f64()
            );
        }
    })?;
    Ok(outcome)
}

/// Loads `paths` (averaging the last `avg_last` of them) for `corpus`.
pub fn load_model(cfg: &RunConfig, corpus: &Corpus, paths: &[PathBuf], avg_last: usize) -> Result<ModelState> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoint given".into()));
    }
    let k = avg_last.clamp(1, paths.len());
    train::average_checkpoints(&paths[paths.len() - k..], &model_config(cfg, corpus))
}

/// `ckpt-<epoch>.pvck` files of a run directory, by epoch.
pub fn run_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("ckpt-")?.strip_suffix(".pvck")?.parse().ok()?;
            Some((epoch, dir.join(name)))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Data(format!("no checkpoints in {}", dir.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotResult {
    pub lang: String,
    pub pairs: usize,
    pub bleu: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Finetunes `start` on `pairs` pairs from the few-shot pool of `lang`,
/// once per seed, and scores each result on the test set. Writes
/// `seed-<k>.pvck` files and `report.csv` to `out`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_run(
    cfg: &RunConfig,
    corpus: &Corpus,
    start: &ModelState,
    lang: &str,
    pairs: usize,
    seeds: usize,
    out: &Path,
    progress: Progress,
) -> Result<FewShotResult> {
    if seeds == 0 {
        return Err(Error::Config("at least one finetuning seed is required".into()));
    }
    if !corpus.languages.low.iter().any(|l| l.tag == lang) {
        return Err(Error::Config(format!("{lang} is not a low-resource language")));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut scores = Vec::with_capacity(seeds);
    let mut csv = String::from("task,pairs,seed,bleu\n");
    for k in 0..seeds as u64 {
        let picked = sample_pairs(corpus, lang, pairs, cfg.seed.wrapping_mul(1000).wrapping_add(k))?;
        let (state, _) = finetune(start, corpus, &picked, &cfg.train, k)?;
        state.to_table().save(&out.join(format!("seed-{k}.pvck")))?;
        let b = test_bleu(&state, corpus, lang, cfg.eval.test_limit, &cfg.decode)?;
        say!(progress, "  {lang} few-shot seed {k}: BLEU {b:.2}");
        let _ = writeln!(
            csv,
            "few-shot {lang}->{},{pairs},{k},{b:.4}",
            corpus.languages.target.tag
        );
        scores.push(b);
    }
    let (mean, std) = mean_std(&scores);
    let _ = writeln!(csv, "task,pairs,mean,std");
    let _ = writeln!(
        csv,
        "few-shot {lang}->{},{pairs},{mean:.4},{std:.4}",
        corpus.languages.target.tag
    );
    let path = out.join("report.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(FewShotResult {
        lang: lang.to_string(),
        pairs,
        bleu: scores,
        mean,
        std,
    })
}

/// Results of the evaluation tasks that ran.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub overlap: Option<f64>,
    pub grounding: Option<f64>,
    pub files: Vec<PathBuf>,
}

impl EvalOutcome {
    pub fn bleu(&self, task: &str) -> Option<f64> {
        self.report.bleu.iter().find(|r| r.task == task).map(|r| r.bleu)
    }

    pub fn recall(&self, task: &str, k: usize) -> Option<f64> {
        self.report
            .recall
            .iter()
            .find(|r| r.task == task && r.k == k)
            .map(|r| r.recall)
    }
}

/// Task label of a translation test set, e.g. `fr->en`.
pub fn direction(corpus: &Corpus, lang: &str) -> String {
    format!("{lang}->{}", corpus.languages.target.tag)
}

/// Runs the selected tasks on `state` and writes reports under `out`.
pub fn eval_run(
    cfg: &RunConfig,
    corpus: &Corpus,
    state: &ModelState,
    tasks: &[EvalTask],
    out: &Path,
    progress: Progress,
) -> Result<EvalOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut res = EvalOutcome::default();
    let langs = &corpus.languages;
    let sources: Vec<&str> = std::iter::once(langs.high.tag.as_str())
        .chain(langs.low.iter().map(|l| l.tag.as_str()))
        .collect();
    for task in tasks {
        match task {
            EvalTask::Translate => {
                for lang in &sources {
                    let b = test_bleu(state, corpus, lang, cfg.eval.test_limit, &cfg.decode)?;
                    let n = corpus.select(lang, Split::Test).len().min(cfg.eval.test_limit);
                    say!(progress, "  {} BLEU {b:.2}", direction(corpus, lang));
                    res.report.bleu.push(BleuRow {
                        task: direction(corpus, lang),
                        bleu: b,
                        n,
                        seed: cfg.seed,
                    });
                }
            }
            EvalTask::Retrieve => {
                for lang in &sources {
                    let r = test_recall(state, corpus, lang, cfg.eval.retrieval_n, &[1, 5, 10])?;
                    for (k, v) in r {
                        say!(progress, "  retrieve {lang} R@{k} {v:.2}");
                        res.report.recall.push(RecallRow {
                            task: format!("retrieve {lang}"),
                            k,
                            recall: v,
                        });
                    }
                }
            }
            EvalTask::Attn => {
                let dir = out.join("attn");
                let mut all = Vec::new();
                for l in &langs.low {
                    let ids: Vec<usize> = corpus
                        .select(&l.tag, Split::Test)
                        .into_iter()
                        .take(cfg.eval.attn_samples)
                        .collect();
                    for &i in ids.iter().take(5) {
                        export_attention(state, corpus, i, &dir)?;
                    }
                    all.extend(ids);
                }
                let g = attention_grounding(state, corpus, &all)?;
                say!(progress, "  attention on the named object's cell: {:.1}%", 100.0 * g);
                let path = dir.join("grounding.csv");
                fs::write(
                    &path,
                    format!("task,n,fraction\nshape-word argmax in cell,{},{g:.6}\n", all.len()),
                )
                .map_err(|e| Error::io(&path, e))?;
                res.grounding = Some(g);
                res.files.push(path);
            }
            EvalTask::Reprs => {
                let items: Vec<(String, Vec<usize>)> = sources
                    .iter()
                    .flat_map(|lang| {
                        corpus
                            .select(lang, Split::Test)
                            .into_iter()
                            .take(cfg.eval.repr_per_lang)
                            .map(|i| (lang.to_string(), corpus.vocab.tokenize(&corpus.samples[i].src)))
                    })
                    .collect();
                let ex = export_sentence_reprs(state, &items)?;
                let path = out.join("reprs.csv");
                fs::write(&path, ex.to_csv()).map_err(|e| Error::io(&path, e))?;
                let opath = out.join("overlap.csv");
                fs::write(
                    &opath,
                    format!("task,n,overlap\nsentence reprs,{},{:.6}\n", items.len(), ex.overlap),
                )
                .map_err(|e| Error::io(&opath, e))?;
                say!(
                    progress,
                    "  overlap score {:.4} over {} sentences",
                    ex.overlap,
                    items.len()
                );
                res.overlap = Some(ex.overlap);
                res.files.extend([path, opath]);
            }
        }
    }
    if !res.report.bleu.is_empty() || !res.report.recall.is_empty() {
        let path = out.join("report.csv");
        fs::write(&path, res.report.to_csv()).map_err(|e| Error::io(&path, e))?;
        res.files.push(path);
    }
    Ok(res)
}

/// Everything `reproduce` produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub checkpoints: Vec<String>,
    pub checkpoint_hashes: Vec<String>,
    pub reports: Vec<String>,
}

/// One system of the comparison.
#[derive(Clone, Debug)]
pub struct SystemResult {
    pub name: String,
    pub zero_shot: Vec<(String, f64)>,
    pub supervised: f64,
    pub recall: Vec<(usize, f64)>,
    pub overlap: f64,
    pub grounding: Option<f64>,
}

impl SystemResult {
    pub fn zero_shot_mean(&self) -> f64 {
        self.zero_shot.iter().map(|(_, b)| b).sum::<f64>() / self.zero_shot.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ReproduceSummary {
    pub systems: Vec<SystemResult>,
    /// `(system, per-language few-shot results)`.
    pub fewshot: Vec<(String, Vec<FewShotResult>)>,
    pub manifest: RunManifest,
    pub seconds_main: f64,
}

impl ReproduceSummary {
    pub fn system(&self, name: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.name == name)
    }

    pub fn fewshot_mean(&self, name: &str) -> Option<f64> {
        let (_, r) = self.fewshot.iter().find(|(n, _)| n == name)?;
        Some(r.iter().map(|x| x.mean).sum::<f64>() / r.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,metric,value\n");
        for sys in &self.systems {
            for (lang, b) in &sys.zero_shot {
                let _ = writeln!(s, "{},bleu {lang},{b:.4}", sys.name);
            }
            let _ = writeln!(s, "{},bleu zero-shot mean,{:.4}", sys.name, sys.zero_shot_mean());
            let _ = writeln!(s, "{},bleu supervised,{:.4}", sys.name, sys.supervised);
            for (k, r) in &sys.recall {
                let _ = writeln!(s, "{},R@{k},{r:.4}", sys.name);
            }
            let _ = writeln!(s, "{},overlap,{:.6}", sys.name, sys.overlap);
            if let Some(g) = sys.grounding {
                let _ = writeln!(s, "{},attention grounding,{g:.6}", sys.name);
            }
        }
        for (name, rs) in &self.fewshot {
            for r in rs {
                let _ = writeln!(s, "{name},few-shot {} mean,{:.4}", r.lang, r.mean);
                let _ = writeln!(s, "{name},few-shot {} std,{:.4}", r.lang, r.std);
            }
        }
        s
    }
}

const SYSTEMS: [(&str, Mode, &[Ablation]); 5] = [
    ("baseline", Mode::Baseline, &[]),
    ("s-ctr", Mode::SCtr, &[]),
    ("s+t-ctr", Mode::STCtr, &[]),
    ("s+t-ctr-no-target", Mode::STCtr, &[Ablation::NoTarget]),
    ("s+t-ctr-l2", Mode::STCtr, &[Ablation::L2]),
];

/// Generates the corpus, trains the three systems and both ablations,
/// evaluates them, runs the few-shot protocol for the baseline and the full
/// model, and writes `summary.csv` and `manifest.json` under `out`.
pub fn reproduce(cfg: &RunConfig, out: &Path, progress: Progress) -> Result<ReproduceSummary> {
    cfg.validate()?;
    let clock = Instant::now();
    let data_dir = out.join("data");
    say!(progress, "generating corpus");
    gen(cfg, &data_dir, progress)?;
    let corpus = Corpus::load(&data_dir)?;
    let corpus_hash = corpus_hash(&data_dir)?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut systems = Vec::new();
    let mut states = Vec::new();
    let mut seconds_main = 0.0;
    for (name, mode, ablations) in SYSTEMS {
        say!(progress, "training {name}");
        let run_dir = out.join("runs").join(name);
        let t = train_run(cfg, &corpus, &run_dir, mode, ablations, false, progress)?;
        let state = load_model(cfg, &corpus, &t.checkpoints, cfg.train.checkpoint_avg_k)?;
        checkpoints.push(t.checkpoints.last().cloned().unwrap_or_else(|| t.log.clone()));
        reports.push(t.log);
        say!(progress, "evaluating {name}");
        let tasks = [EvalTask::Translate, EvalTask::Retrieve, EvalTask::Reprs, EvalTask::Attn];
        let tasks = if mode == Mode::STCtr { &tasks[..] } else { &tasks[..3] };
        let ev = eval_run(cfg, &corpus, &state, tasks, &out.join("eval").join(name), progress)?;
        reports.extend(ev.files.iter().cloned());
        let low: Vec<(String, f64)> = corpus
            .languages
            .low
            .iter()
            .map(|l| (l.tag.clone(), ev.bleu(&direction(&corpus, &l.tag)).unwrap_or(0.0)))
            .collect();
        let first_low = &corpus.languages.low[0].tag;
        systems.push(SystemResult {
            name: name.to_string(),
            zero_shot: low,
            supervised: ev.bleu(&direction(&corpus, &corpus.languages.high.tag)).unwrap_or(0.0),
            recall: [1, 5, 10]
                .iter()
                .map(|&k| (k, ev.recall(&format!("retrieve {first_low}"), k).unwrap_or(0.0)))
                .collect(),
            overlap: ev.overlap.unwrap_or(f64::NAN),
            grounding: ev.grounding,
        });
        states.push((name, state));
        if name == "s+t-ctr" {
            seconds_main = clock.elapsed().as_secs_f64();
        }
    }
    let mut fewshot = Vec::new();
    for (name, state) in states.iter().filter(|(n, _)| *n == "baseline" || *n == "s+t-ctr") {
        say!(progress, "few-shot finetuning {name}");
        let mut per_lang = Vec::new();
        for l in &corpus.languages.low {
            let dir = out.join("finetune").join(name).join(&l.tag);
            let r = finetune_run(
                cfg,
                &corpus,
                state,
                &l.tag,
                cfg.eval.fewshot_pairs,
                cfg.eval.fewshot_seeds,
                &dir,
                progress,
            )?;
            say!(progress, "  {} few-shot mean {:.2} ± {:.2}", l.tag, r.mean, r.std);
            reports.push(dir.join("report.csv"));
            per_lang.push(r);
        }
        fewshot.push((name.to_string(), per_lang));
    }
    let rel = |p: &PathBuf| p.strip_prefix(out).unwrap_or(p).display().to_string();
    let manifest = RunManifest {
        config: cfg.to_text(),
        seed: cfg.seed,
        corpus_hash,
        checkpoint_hashes: checkpoints.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
        checkpoints: checkpoints.iter().map(rel).collect(),
        reports: reports.iter().map(rel).collect(),
    };
    let summary = ReproduceSummary {
        systems,
        fewshot,
        manifest,
        seconds_main,
    };
    let path = out.join("summary.csv");
    fs::write(&path, summary.to_csv()).map_err(|e| Error::io(&path, e))?;
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&summary.manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    say!(progress, "done in {:.0}s", clock.elapsed().as_secs_f64());
    Ok(summary)
}
