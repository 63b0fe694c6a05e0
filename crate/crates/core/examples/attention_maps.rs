//! Exports selective-attention heat maps of a trained model and measures how
//! often a shape word attends to its object's cell.
//!
//! `cargo run --example attention_maps -p pivot-align [-- <out dir>]`

use std::path::PathBuf;

use pivot_align::data::{build_corpus, Split};
use pivot_align::eval::{attention_grounding, attention_map, export_attention};
use pivot_align::pipeline::{load_model, train_run};
use pivot_align::train::Mode;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pivot-align-attention"));
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let run = train_run(
        &cfg,
        &corpus,
        &out.join("run"),
        Mode::STCtr,
        &[],
        false,
        &mut std::io::sink(),
    )?;
    let state = load_model(&cfg, &corpus, &run.checkpoints, cfg.train.checkpoint_avg_k)?;

    let lang = corpus.languages.low[0].tag.clone();
    let ids = corpus.select(&lang, Split::Test);
    let first = ids[0];
    let map = attention_map(&state, &corpus, first)?;
    println!("{}: {:?}", corpus.samples[first].id, corpus.samples[first].src);
    for (j, tok) in map.tokens.iter().enumerate() {
        println!("  {tok:<8} strongest patch {}", map.argmax(j));
    }
    let exported = export_attention(&state, &corpus, first, &out.join("maps"))?;
    println!(
        "{} heat maps written under {}",
        exported.tokens.len(),
        out.join("maps").display()
    );
    let frac = attention_grounding(&state, &corpus, &ids[..cfg.eval.attn_samples])?;
    println!("shape words attending to their own cell: {:.1}%", 100.0 * frac);
    Ok(())
}
