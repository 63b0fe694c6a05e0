//! Projects sentence representations of every source language to 2-D and
//! compares how well the languages overlap with and without image pivoting.
//!
//! `cargo run --example representation_overlap -p pivot-align [-- <out dir>]`

use std::path::PathBuf;

use pivot_align::data::{build_corpus, Split};
use pivot_align::eval::export_sentence_reprs;
use pivot_align::pipeline::{load_model, train_run};
use pivot_align::train::Mode;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pivot-align-reprs"));
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let items: Vec<(String, Vec<usize>)> = corpus
        .languages
        .all()
        .filter(|l| l.tag != corpus.languages.target.tag)
        .flat_map(|l| {
            corpus
                .select(&l.tag, Split::Test)
                .into_iter()
                .take(cfg.eval.repr_per_lang)
                .map(|i| (l.tag.clone(), corpus.vocab.tokenize(&corpus.samples[i].src)))
                .collect::<Vec<_>>()
        })
        .collect();

    for mode in [Mode::Baseline, Mode::STCtr] {
        let run = train_run(
            &cfg,
            &corpus,
            &out.join(mode.as_str()),
            mode,
            &[],
            false,
            &mut std::io::sink(),
        )?;
        let state = load_model(&cfg, &corpus, &run.checkpoints, cfg.train.checkpoint_avg_k)?;
        let ex = export_sentence_reprs(&state, &items)?;
        let path = out.join(format!("{}.reprs.csv", mode.as_str()));
        std::fs::write(&path, ex.to_csv()).map_err(|e| pivot_align::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        println!(
            "{:<8} overlap score {:.3} ({} points in {})",
            mode.as_str(),
            ex.overlap,
            items.len(),
            path.display()
        );
    }
    Ok(())
}
