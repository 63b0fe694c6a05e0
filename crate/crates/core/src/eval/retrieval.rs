use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};

/// Text-to-image Recall@K in percent. Row `i` of `text` pairs with row `i`
/// of `images`; candidates are ranked by cosine similarity with ties going
/// to the lower index.
pub fn retrieval_recall(text: &Tensor, images: &Tensor, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if text.rank() != 2 || text.shape() != images.shape() {
        return Err(Error::dim(format!(
            "retrieval over {:?} and {:?}",
            text.shape(),
            images.shape()
        )));
    }
    let n = text.shape()[0];
    if ks.iter().any(|&k| k == 0 || k >= n) {
        return Err(Error::contract(format!(
            "need more than max(K) = {ks:?} candidates, got {n}"
        )));
    }
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let sims: Vec<f64> = (0..n)
            .map(|j| cosine_similarity(text.row(i), images.row(j)))
            .collect::<Result<_>>()?;
        let own = sims[i];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        ranks.push(ahead + 1);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, 100.0 * hits as f64 / n as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_retrieval_is_perfect() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(retrieval_recall(&t, &t, &[1]).unwrap(), vec![(1, 100.0)]);
        assert!(retrieval_recall(&t, &t, &[3]).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(retrieval_recall(&t, &t, &[1]).unwrap(), vec![(1, 50.0)]);
    }
}
