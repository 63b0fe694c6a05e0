//! Text-to-image retrieval recall before and after contrastive training.
//!
//! `cargo run --example retrieval -p pivot-align`

use pivot_align::data::build_corpus;
use pivot_align::eval::test_recall;
use pivot_align::nn::ModelState;
use pivot_align::pipeline::{load_model, train_run};
use pivot_align::train::Mode;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let n = cfg.eval.retrieval_n;
    let untrained = ModelState::init(&cfg.model_for(corpus.vocab.len()), cfg.seed)?;
    let dir = std::env::temp_dir().join("pivot-align-retrieval");
    let run = train_run(&cfg, &corpus, &dir, Mode::SCtr, &[], false, &mut std::io::sink())?;
    let trained = load_model(&cfg, &corpus, &run.checkpoints, cfg.train.checkpoint_avg_k)?;

    println!("chance R@1 over {n} candidates: {:.2}%", 100.0 / n as f64);
    for (name, state) in [("untrained", &untrained), ("s-ctr", &trained)] {
        for l in corpus.languages.all().filter(|l| l.tag != corpus.languages.target.tag) {
            let r = test_recall(state, &corpus, &l.tag, n, &[1, 5, 10])?;
            let line: Vec<String> = r.iter().map(|(k, v)| format!("R@{k} {v:5.1}")).collect();
            println!("{name:<10} {:<3} {}", l.tag, line.join("  "));
        }
    }
    Ok(())
}
