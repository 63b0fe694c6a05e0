//! Decoding and measurement: beam search, BLEU, retrieval recall,
//! attention maps and sentence-representation geometry.

mod analysis;
mod beam;
mod bleu;
mod retrieval;

pub use analysis::{
    attention_grounding, attention_map, encode_images, encode_sentences, export_attention, export_sentence_reprs,
    overlap_score, pca2, AttentionMap, ReprExport,
};
pub use beam::{beam_decode, sequence_score, DecodeConfig};
pub use bleu::{bleu, BleuStats};
pub use retrieval::retrieval_recall;

use std::fmt::Write as _;

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::ModelState;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuRow {
    pub task: String,
    pub bleu: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallRow {
    pub task: String,
    pub k: usize,
    pub recall: f64,
}

/// Scores written as CSV: a `task,bleu,n,seed` block followed by a
/// `task,K,recall` block when retrieval was measured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub bleu: Vec<BleuRow>,
    pub recall: Vec<RecallRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if !self.bleu.is_empty() {
            s.push_str("task,bleu,n,seed\n");
            for r in &self.bleu {
                let _ = writeln!(s, "{},{:.4},{},{}", r.task, r.bleu, r.n, r.seed);
            }
        }
        if !self.recall.is_empty() {
            s.push_str("task,K,recall\n");
            for r in &self.recall {
                let _ = writeln!(s, "{},{},{:.4}", r.task, r.k, r.recall);
            }
        }
        s
    }
}

/// Decodes the source side of `samples`; returns hypotheses and
/// references as strings.
pub fn translate(
    state: &ModelState,
    corpus: &Corpus,
    samples: &[usize],
    cfg: &DecodeConfig,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for &i in samples {
        let s = &corpus.samples[i];
        let r = s
            .tgt
            .clone()
            .ok_or_else(|| Error::Data(format!("sample {} has no reference", s.id)))?;
        let out = beam_decode(state, &corpus.vocab.tokenize(&s.src), cfg)?;
        hyps.push(corpus.vocab.detokenize(&out));
        refs.push(r);
    }
    Ok((hyps, refs))
}

/// Corpus BLEU on the first `limit` test samples of `lang`.
pub fn test_bleu(state: &ModelState, corpus: &Corpus, lang: &str, limit: usize, cfg: &DecodeConfig) -> Result<f64> {
    let ids: Vec<usize> = corpus.select(lang, Split::Test).into_iter().take(limit).collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("no test samples for {lang}")));
    }
    let (h, r) = translate(state, corpus, &ids, cfg)?;
    bleu(&h, &r)
}

/// Text-to-image recall over the first `n` test samples of `lang`.
pub fn test_recall(
    state: &ModelState,
    corpus: &Corpus,
    lang: &str,
    n: usize,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let ids: Vec<usize> = corpus.select(lang, Split::Test).into_iter().take(n).collect();
    let seqs: Vec<Vec<usize>> = ids
        .iter()
        .map(|&i| corpus.vocab.tokenize(&corpus.samples[i].src))
        .collect();
    let imgs: Vec<_> = ids.iter().map(|&i| &corpus.images[i]).collect();
    let t = encode_sentences(state, &seqs)?;
    let v = encode_images(state, &imgs)?;
    retrieval_recall(&t, &v, ks)
}
