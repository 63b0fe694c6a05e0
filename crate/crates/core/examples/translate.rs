//! Beam-search translation and corpus BLEU.
//!
//! `cargo run --example translate -p pivot-align`

use pivot_align::data::{build_corpus, Split};
use pivot_align::eval::{beam_decode, bleu, sequence_score, translate, BleuStats, DecodeConfig};
use pivot_align::pipeline::{load_model, train_run};
use pivot_align::train::Mode;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    // BLEU on a hand-checkable pair: 3/4, 2/3 and 1/2 n-gram precisions, no
    // 4-gram match, same length.
    let mut stats = BleuStats::default();
    stats.add("a b c d", "a b c e");
    println!("BLEU(\"a b c d\" | \"a b c e\") = {:.4}", stats.score());
    // corpus BLEU needs at least one 4-gram in the hypotheses
    let refs = ["the red circle", "the blue bar green square"];
    println!("BLEU of an exact match = {:.1}", bleu(&refs, &refs)?);

    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let dir = std::env::temp_dir().join("pivot-align-translate");
    let run = train_run(&cfg, &corpus, &dir, Mode::Baseline, &[], false, &mut std::io::sink())?;
    let state = load_model(&cfg, &corpus, &run.checkpoints, cfg.train.checkpoint_avg_k)?;

    let high = corpus.languages.high.tag.clone();
    let ids: Vec<usize> = corpus.select(&high, Split::Test).into_iter().take(5).collect();
    let (hyps, refs) = translate(&state, &corpus, &ids, &cfg.decode)?;
    for ((h, r), &i) in hyps.iter().zip(&refs).zip(&ids) {
        println!("{:<32} -> {h:<32} (reference {r})", corpus.samples[i].src);
    }
    let src = corpus.vocab.tokenize(&corpus.samples[ids[0]].src);
    for beam in [1, 5] {
        let dc = DecodeConfig {
            beam_size: beam,
            ..cfg.decode.clone()
        };
        let out = beam_decode(&state, &src, &dc)?;
        println!(
            "beam {beam}: {:?} log-prob {:.4}",
            corpus.vocab.detokenize(&out),
            sequence_score(&state, &src, &out)?
        );
    }
    println!("BLEU on these {}: {:.2}", ids.len(), bleu(&hyps, &refs)?);
    Ok(())
}
