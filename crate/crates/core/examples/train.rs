//! Trains the three systems on the small preset and prints their losses.
//!
//! `cargo run --example train -p pivot-align [-- <mode>]`

use pivot_align::data::build_corpus;
use pivot_align::train::{lr_at, train, Mode};
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let modes: Vec<Mode> = match std::env::args().nth(1) {
        Some(m) => vec![Mode::parse(&m).expect("baseline, s-ctr or s+t-ctr")],
        None => vec![Mode::Baseline, Mode::SCtr, Mode::STCtr],
    };
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let model = cfg.model_for(corpus.vocab.len());
    println!(
        "lr at steps 1, {w}, {}: {:.2e} {:.2e} {:.2e}",
        4 * cfg.train.warmup_steps,
        lr_at(1, cfg.train.lr_peak, cfg.train.warmup_steps),
        lr_at(cfg.train.warmup_steps, cfg.train.lr_peak, cfg.train.warmup_steps),
        lr_at(4 * cfg.train.warmup_steps, cfg.train.lr_peak, cfg.train.warmup_steps),
        w = cfg.train.warmup_steps,
    );
    for mode in modes {
        let tcfg = cfg.train.clone().with_mode(mode);
        let dir = std::env::temp_dir().join(format!("pivot-align-train-{}", mode.as_str()));
        let out = train(&corpus, &model, &tcfg, &dir, false, |_| {})?;
        println!(
            "{} ({} steps, log {})",
            mode.as_str(),
            out.records.len(),
            out.log.display()
        );
        for r in out.records.iter().step_by(out.records.len() / 4) {
            let c = &r.components;
            println!(
                "  step {:>4} stage {} ce {:.3} s_ctr {:.3} t_ctr {:.3}",
                r.step,
                r.stage.as_str(),
                c.ce,
                c.s_ctr,
                c.t_ctr
            );
        }
    }
    Ok(())
}
