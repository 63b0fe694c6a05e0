//! Generates a small corpus, prints its composition and a few captions, and
//! writes it to disk.
//!
//! `cargo run --example generate_corpus -p pivot-align [-- <out dir>]`

use std::path::PathBuf;

use pivot_align::data::{build_corpus, Corpus, Split};
use pivot_align::pipeline::corpus_hash;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pivot-align-corpus"));
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    print!("{}", corpus.counts_table());
    println!("vocabulary: {:?}", corpus.vocab.tokens());

    let high = &corpus.languages.high.tag;
    for &i in corpus.select(high, Split::Train).iter().take(3) {
        let s = &corpus.samples[i];
        println!("{}: {:?} -> {:?}", s.id, s.src, s.tgt.as_deref().unwrap_or(""));
    }
    for l in &corpus.languages.low {
        let s = &corpus.samples[corpus.select(&l.tag, Split::Test)[0]];
        println!("{}: {:?} -> {:?}", s.id, s.src, s.tgt.as_deref().unwrap_or(""));
    }

    corpus.write(&out)?;
    let back = Corpus::load(&out)?;
    assert_eq!(back.samples, corpus.samples);
    println!("written to {} (hash {})", out.display(), corpus_hash(&out)?);
    Ok(())
}
