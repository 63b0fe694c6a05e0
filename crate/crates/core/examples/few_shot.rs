//! Trains the full model on the small preset, then finetunes it on a few
//! parallel pairs of one low-resource language over several seeds.
//!
//! `cargo run --example few_shot -p pivot-align`

use pivot_align::data::build_corpus;
use pivot_align::eval::test_bleu;
use pivot_align::pipeline::{finetune_run, load_model, train_run};
use pivot_align::train::Mode;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let root = std::env::temp_dir().join("pivot-align-few-shot");
    let mut quiet = std::io::sink();
    let run = train_run(&cfg, &corpus, &root.join("run"), Mode::STCtr, &[], false, &mut quiet)?;
    let state = load_model(&cfg, &corpus, &run.checkpoints, cfg.train.checkpoint_avg_k)?;

    let lang = corpus.languages.low[0].tag.clone();
    let zero = test_bleu(&state, &corpus, &lang, cfg.eval.test_limit, &cfg.decode)?;
    println!("{lang} zero-shot BLEU {zero:.2}");
    let r = finetune_run(
        &cfg,
        &corpus,
        &state,
        &lang,
        cfg.eval.fewshot_pairs,
        cfg.eval.fewshot_seeds,
        &root.join("finetune"),
        &mut std::io::stdout(),
    )?;
    println!("{lang} after {} pairs: mean {:.2}, std {:.2}", r.pairs, r.mean, r.std);
    Ok(())
}
