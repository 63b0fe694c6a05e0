use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pivot_align::data::Corpus;
use pivot_align::pipeline::{self, Ablation, EvalTask};
use pivot_align::train::Mode;
use pivot_align::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "pivot-align", version, about = "Image-pivoted translation experiments")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set train.max_epochs=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    Gen {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one system.
    Train {
        #[arg(long, default_value = "data")]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline, s-ctr or s+t-ctr.
        #[arg(long, default_value = "s+t-ctr")]
        mode: String,
        /// no-target and/or l2.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Continue from the newest checkpoint in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot finetuning on pairs from the low-resource pools.
    Finetune {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "data")]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Low-resource language; all of them when omitted.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 1)]
        avg_last: usize,
    },
    /// Evaluate checkpoints.
    Eval {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "data")]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Any of translate, retrieve, attn, reprs.
        #[arg(long, value_delimiter = ',', default_value = "translate")]
        task: Vec<String>,
        #[arg(long, default_value_t = 1)]
        avg_last: usize,
    },
    /// Corpus, all systems, evaluation and few-shot runs in one go.
    Reproduce {
        #[arg(long, default_value = "reproduce")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let p = cli.workdir.join(p);
            RunConfig::parse(
                &fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            )?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    base.join(p)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let wd = &cli.workdir;
    let mut out = std::io::stdout();
    match &cli.cmd {
        Cmd::Gen { out: dir } => {
            pipeline::gen(&cfg, &resolve(wd, dir), &mut out)?;
        }
        Cmd::Train {
            corpus,
            out: dir,
            mode,
            ablate,
            resume,
        } => {
            let mode = Mode::parse(mode).ok_or_else(|| Error::Config(format!("unknown mode {mode:?}")))?;
            let ablations = ablate
                .iter()
                .map(|a| Ablation::parse(a).ok_or_else(|| Error::Config(format!("unknown ablation {a:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let corpus = Corpus::load(&resolve(wd, corpus))?;
            let t = pipeline::train_run(&cfg, &corpus, &resolve(wd, dir), mode, &ablations, *resume, &mut out)?;
            println!("{} checkpoints, log {}", t.checkpoints.len(), t.log.display());
        }
        Cmd::Finetune {
            checkpoints,
            corpus,
            out: dir,
            lang,
            pairs,
            seeds,
            avg_last,
        } => {
            let corpus = Corpus::load(&resolve(wd, corpus))?;
            let paths: Vec<PathBuf> = checkpoints.iter().map(|p| resolve(wd, p)).collect();
            let start = pipeline::load_model(&cfg, &corpus, &paths, *avg_last)?;
            let langs: Vec<String> = match lang {
                Some(l) => vec![l.clone()],
                None => corpus.languages.low.iter().map(|l| l.tag.clone()).collect(),
            };
            let pairs = pairs.unwrap_or(cfg.eval.fewshot_pairs);
            let seeds = seeds.unwrap_or(cfg.eval.fewshot_seeds);
            for l in &langs {
                let dir = resolve(wd, dir).join(l);
                let r = pipeline::finetune_run(&cfg, &corpus, &start, l, pairs, seeds, &dir, &mut out)?;
                println!("{l}: {} pairs, BLEU mean {:.2} std {:.2}", r.pairs, r.mean, r.std);
            }
        }
        Cmd::Eval {
            checkpoints,
            corpus,
            out: dir,
            task,
            avg_last,
        } => {
            let tasks = task
                .iter()
                .map(|t| EvalTask::parse(t).ok_or_else(|| Error::Config(format!("unknown task {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let corpus = Corpus::load(&resolve(wd, corpus))?;
            let paths: Vec<PathBuf> = checkpoints.iter().map(|p| resolve(wd, p)).collect();
            let state = pipeline::load_model(&cfg, &corpus, &paths, *avg_last)?;
            pipeline::eval_run(&cfg, &corpus, &state, &tasks, &resolve(wd, dir), &mut out)?;
        }
        Cmd::Reproduce { out: dir } => {
            let s = pipeline::reproduce(&cfg, &resolve(wd, dir), &mut out)?;
            print!("{}", s.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
