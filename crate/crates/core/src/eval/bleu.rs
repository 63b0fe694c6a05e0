use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<'a>(words: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    for w in words.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

impl BleuStats {
    pub fn add(&mut self, hyp: &str, reference: &str) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngrams(&h, n);
            let rc = ngrams(&r, n);
            self.total[n - 1] += h.len().saturating_sub(n - 1);
            self.correct[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// BLEU-4 in `[0, 100]` with exponential smoothing: the k-th order
    /// that has no match gets precision `1 / (2^k · total)`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut smooth = 1.0;
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.total[n] == 0 {
                return 0.0;
            }
            let p = if self.correct[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * self.total[n] as f64)
            } else {
                self.correct[n] as f64 / self.total[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus-level BLEU of whitespace-tokenized hypotheses against single
/// references.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::contract("BLEU needs at least one reference"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut s = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        s.add(h.as_ref(), r.as_ref());
    }
    Ok(s.score())
}
