use std::cmp::Ordering;

use crate::data::vocab::{Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{Forward, ModelState, TokenBatch};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens per hypothesis, eos included.
    pub max_decode_len: usize,
    /// Scores are divided by `length^length_penalty`; 0 disables it.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_decode_len: 15,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("beam_size and max_decode_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Hyp {
    /// Generated tokens, without the leading bos.
    tokens: Vec<usize>,
    score: f64,
}

fn normalized(h: &Hyp, cfg: &DecodeConfig) -> f64 {
    if cfg.length_penalty == 0.0 {
        h.score
    } else {
        h.score / (h.tokens.len() as f64).powf(cfg.length_penalty)
    }
}

/// Higher score first; ties go to the lower token sequence, then the
/// shorter one.
fn rank(a: &Hyp, b: &Hyp, cfg: &DecodeConfig) -> Ordering {
    normalized(b, cfg)
        .total_cmp(&normalized(a, cfg))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Tokens that may be generated: everything except pad, bos and unk.
fn allowed(v: usize) -> bool {
    v == EOS || !Vocabulary::is_special(v)
}

fn search(state: &ModelState, src: &[usize], cfg: &DecodeConfig, beam: usize) -> Result<Hyp> {
    let max_steps = cfg.max_decode_len.min(state.config().max_len - 1);
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, state);
    let memory = fw.encode_text(&TokenBatch::new(&[src])?)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..max_steps {
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let logits = fw.decode_step(&prefixes, &memory)?;
        let lp = fw.g.log_softmax(logits, 1)?;
        let lp = fw.g.value(lp).clone();
        let v = lp.shape()[1];
        let mut cands: Vec<Hyp> = Vec::with_capacity(live.len() * v);
        for (k, h) in live.iter().enumerate() {
            for tok in (0..v).filter(|&t| allowed(t)) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push(Hyp {
                    tokens,
                    score: h.score + lp.data()[k * v + tok],
                });
            }
        }
        cands.sort_by(|a, b| rank(a, b, cfg));
        cands.truncate(beam);
        live.clear();
        for c in cands {
            if c.tokens.last() == Some(&EOS) || step + 1 == max_steps {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        finished.sort_by(|a, b| rank(a, b, cfg));
        // Unnormalized scores only fall as hypotheses grow, so nothing still
        // live can overtake the best finished hypothesis.
        let settled = cfg.length_penalty == 0.0
            && finished
                .first()
                .zip(live.iter().map(|h| h.score).reduce(f64::max))
                .is_some_and(|(best, top)| best.score >= top);
        if live.is_empty() || finished.len() >= beam || settled {
            break;
        }
    }
    finished.sort_by(|a, b| rank(a, b, cfg));
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

/// Beam search over the decoder without length normalization (unless
/// `length_penalty` is set). The greedy hypothesis is always a candidate,
/// so the result never scores below greedy decoding. Returns the generated
/// tokens without bos or eos.
pub fn beam_decode(state: &ModelState, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut best = search(state, src, cfg, cfg.beam_size)?;
    if cfg.beam_size > 1 {
        let greedy = search(state, src, cfg, 1)?;
        if rank(&greedy, &best, cfg) == Ordering::Less {
            best = greedy;
        }
    }
    let mut out = best.tokens;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}

/// Sum of next-token log-probabilities of `target` followed by eos.
pub fn sequence_score(state: &ModelState, src: &[usize], target: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, state);
    let memory = fw.encode_text(&TokenBatch::new(&[src])?)?;
    let input: Vec<usize> = std::iter::once(BOS).chain(target.iter().copied()).collect();
    let logits = fw.decode(&TokenBatch::new(&[input])?, &memory)?;
    let lp = fw.g.log_softmax(logits, 2)?;
    let lp = fw.g.value(lp);
    let v = lp.shape()[2];
    Ok(target
        .iter()
        .chain(std::iter::once(&EOS))
        .enumerate()
        .map(|(j, &t)| lp.data()[j * v + t])
        .sum())
}
