use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};

/// Token ids of every corpus sample.
pub struct Prepared<'a> {
    pub corpus: &'a Corpus,
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Option<Vec<usize>>>,
}

impl<'a> Prepared<'a> {
    /// Tokenizes every sample; decoder sequences gain bos/eos, so targets
    /// must leave room for two specials within `max_len`.
    pub fn new(corpus: &'a Corpus, max_len: usize) -> Result<Self> {
        let mut src = Vec::with_capacity(corpus.samples.len());
        let mut tgt = Vec::with_capacity(corpus.samples.len());
        for s in &corpus.samples {
            let x = corpus.vocab.tokenize(&s.src);
            if x.is_empty() || x.len() > max_len {
                return Err(Error::Data(format!("sample {} has {} source tokens", s.id, x.len())));
            }
            let y = s.tgt.as_deref().map(|t| corpus.vocab.tokenize(t));
            if let Some(y) = &y {
                if y.is_empty() || y.len() + 1 > max_len {
                    return Err(Error::Data(format!("sample {} has a bad reference", s.id)));
                }
            }
            src.push(x);
            tgt.push(y);
        }
        Ok(Prepared { corpus, src, tgt })
    }

    fn tokens(&self, i: usize) -> usize {
        self.src[i].len() + self.tgt[i].as_ref().map_or(0, |y| y.len() + 2)
    }
}

/// Sample indices of one optimization step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    /// Samples with a reference translation. They feed cross-entropy and,
    /// during training, the (image, source) and (image, target) groups.
    pub parallel: Vec<usize>,
    /// Image–caption samples of each low-resource language.
    pub captions: Vec<Vec<usize>>,
}

fn chunk(items: &[usize], n: usize, k: usize) -> Vec<usize> {
    let (lo, hi) = (k * items.len() / n, (k + 1) * items.len() / n);
    items[lo..hi].to_vec()
}

/// Shuffles each language's training samples with a generator seeded by
/// `seed` and cuts every list into the same number of near-equal chunks,
/// so each step sees all languages in proportion. The number of steps is
/// `ceil(total tokens / batch_tokens)`.
pub fn make_batches(data: &Prepared, batch_tokens: usize, seed: u64) -> Vec<Batch> {
    let c = data.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut high = c.select(&c.languages.high.tag, Split::Train);
    high.shuffle(&mut rng);
    let mut low: Vec<Vec<usize>> = c.languages.low.iter().map(|l| c.select(&l.tag, Split::Train)).collect();
    for l in &mut low {
        l.shuffle(&mut rng);
    }
    let total: usize = high.iter().chain(low.iter().flatten()).map(|&i| data.tokens(i)).sum();
    let n = total.div_ceil(batch_tokens).clamp(1, high.len().max(1));
    (0..n)
        .map(|k| Batch {
            parallel: chunk(&high, n, k),
            captions: low.iter().map(|l| chunk(l, n, k)).collect(),
        })
        .collect()
}
