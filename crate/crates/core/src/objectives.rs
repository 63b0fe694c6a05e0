//! Translation and alignment losses recorded on a [`Graph`].

use crate::error::{Error, Result};
use crate::nn::{EncodedImage, EncodedText};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub include_target_contrast: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau_s: 0.007,
            tau_t: 0.1,
            lambda_s: 5.0,
            lambda_t: 1.0,
            include_target_contrast: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_t >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How a loss summed over the items of a group is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over items and groups.
    Sum,
    /// Each group's sum divided by its item count, then summed over groups.
    GroupMean,
}

/// Label-smoothed cross-entropy averaged over positions with `mask` set.
///
/// `logits` is `[..., V]` with one row per entry of `targets`. Each
/// position costs `(1 − ε)·(−log p[target]) + ε·mean_v(−log p[v])`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let v = *shape
        .last()
        .ok_or_else(|| Error::dim("logits must have a vocabulary axis"))?;
    let rows = g.value(logits).numel() / v;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "{} targets and {} mask entries for {rows} logit rows",
            targets.len(),
            mask.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Domain("label smoothing must lie in [0, 1)".into()));
    }
    let real: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if real.is_empty() {
        return Err(Error::contract("cross_entropy over zero unpadded positions"));
    }
    if let Some(&id) = real.iter().map(|&r| &targets[r]).find(|&&t| t >= v) {
        return Err(Error::Vocabulary { id, size: v });
    }
    let flat = g.reshape(logits, vec![rows, v])?;
    let picked_rows = g.index_select(flat, &real)?;
    let lp = g.log_softmax(picked_rows, 1)?;
    let at: Vec<usize> = real.iter().enumerate().map(|(k, &r)| k * v + targets[r]).collect();
    let nll = g.take(lp, &at)?;
    let nll = g.sum(nll);
    let nll = g.scale(nll, 1.0 - smoothing);
    let total = if smoothing > 0.0 {
        let all = g.sum(lp);
        let smooth = g.scale(all, smoothing / v as f64);
        g.add(nll, smooth)?
    } else {
        nll
    };
    Ok(g.scale(total, -1.0 / real.len() as f64))
}

fn check_nonzero_rows(g: &Graph, x: Var, what: &str) -> Result<()> {
    let t = g.value(x);
    let d = *t.shape().last().unwrap_or(&1);
    if t.data().chunks(d).any(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::Domain(format!("{what} contains a zero vector")));
    }
    Ok(())
}

/// Similarity logits `cos(xᵢ, yⱼ) / τ`, shaped like `x · yᵀ`. Left
/// unbounded: the max-shifted log-softmax downstream cannot overflow, and a
/// clamp would zero the gradient of every pair past the bound.
fn similarity_logits(g: &mut Graph, x: Var, y: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    let xn = g.normalize(x)?;
    let yn = g.normalize(y)?;
    let s = g.matmul_nt(xn, yn)?;
    Ok(g.scale(s, 1.0 / tau))
}

/// `−Σᵢ log(exp(s(xᵢ,yᵢ)/τ) / Σⱼ exp(s(xᵢ,yⱼ)/τ))` with cosine similarity
/// `s`, for `M × d` inputs. Asymmetric in `x` and `y`.
pub fn info_nce(g: &mut Graph, x: Var, y: Var, tau: f64) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sx != sy {
        return Err(Error::dim(format!("info_nce of {sx:?} and {sy:?}")));
    }
    check_nonzero_rows(g, x, "x")?;
    check_nonzero_rows(g, y, "y")?;
    let m = sx[0];
    let logits = similarity_logits(g, x, y, tau)?;
    let lp = g.log_softmax(logits, 1)?;
    let diag: Vec<usize> = (0..m).map(|i| i * m + i).collect();
    let pos = g.take(lp, &diag)?;
    let pos = g.sum(pos);
    Ok(g.neg(pos))
}

/// Mean of the encoder states over unpadded positions: `B × d`.
pub fn sentence_repr(g: &mut Graph, text: &EncodedText) -> Result<Var> {
    let (b, l) = (text.batch, text.len);
    let mut w = vec![0.0; b * l];
    for (bi, n) in text.lengths().into_iter().enumerate() {
        if n == 0 {
            return Err(Error::contract("sentence with no unpadded token"));
        }
        for j in 0..l {
            if text.pad_mask[bi * l + j] {
                w[bi * l + j] = 1.0 / n as f64;
            }
        }
    }
    let w = g.constant(crate::tensor::Tensor::new(vec![b, 1, l], w)?);
    let pooled = g.matmul(w, text.states)?;
    let d = g.shape(text.states)[2];
    g.reshape(pooled, vec![b, d])
}

/// The class-token vector: `B × d`.
pub fn sentence_repr_image(img: &EncodedImage) -> Var {
    img.cls
}

/// Paired sentence and image representations of one language group.
#[derive(Clone, Copy, Debug)]
pub struct ContrastGroup {
    pub text: Var,
    pub image: Var,
}

/// `Σ_groups L(W,V) + L(V,W)` at temperature `tau`.
pub fn sentence_contrast(g: &mut Graph, groups: &[ContrastGroup], tau: f64, reduction: Reduction) -> Result<Var> {
    let mut total: Option<Var> = None;
    for grp in groups {
        let m = g.shape(grp.text)[0];
        let a = info_nce(g, grp.text, grp.image, tau)?;
        let b = info_nce(g, grp.image, grp.text, tau)?;
        let mut s = g.add(a, b)?;
        if reduction == Reduction::GroupMean {
            s = g.scale(s, 1.0 / m as f64);
        }
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.map_or_else(|| Ok(g.constant(crate::tensor::Tensor::scalar(0.0))), Ok)
}

/// Token-level `L(w, vᵗ) + L(vᵗ, w)` inside every sentence at temperature
/// `tau`, with tokens at the same index as positives. Padded positions take
/// no part. Per-sentence losses are summed, or averaged with
/// [`Reduction::GroupMean`].
pub fn token_contrast(g: &mut Graph, text: &EncodedText, vt: Var, tau: f64, reduction: Reduction) -> Result<Var> {
    let (b, l) = (text.batch, text.len);
    if g.shape(vt) != g.shape(text.states) {
        return Err(Error::dim("grounded vectors must match the text states"));
    }
    let lens = text.lengths();
    if lens.contains(&0) {
        return Err(Error::contract("sentence with no unpadded token"));
    }
    let logits = similarity_logits(g, text.states, vt, tau)?;
    // Padded rows keep only their own diagonal entry so every softmax slice
    // has support; their log-probability is then exactly zero.
    let mut mask = vec![false; b * l * l];
    for bi in 0..b {
        let m = &text.pad_mask[bi * l..(bi + 1) * l];
        for i in 0..l {
            for j in 0..l {
                mask[(bi * l + i) * l + j] = (m[i] && m[j]) || (!m[i] && i == j);
            }
        }
    }
    let diag: Vec<usize> = (0..b)
        .flat_map(|bi| (0..l).map(move |i| (bi, i)))
        .filter(|&(bi, i)| text.pad_mask[bi * l + i])
        .map(|(bi, i)| (bi * l + i) * l + i)
        .collect();
    let weights: Vec<f64> = (0..b)
        .flat_map(|bi| {
            let w = match reduction {
                Reduction::Sum => 1.0,
                Reduction::GroupMean => 1.0 / b as f64,
            };
            std::iter::repeat_n(w, lens[bi])
        })
        .collect();
    let weights = g.constant(crate::tensor::Tensor::from_vec(weights));
    let mut total: Option<Var> = None;
    for transpose in [false, true] {
        let s = if transpose { g.transpose(logits)? } else { logits };
        let lp = g.masked_log_softmax(s, 2, Some(&mask))?;
        let pos = g.take(lp, &diag)?;
        let pos = g.mul(pos, weights)?;
        let pos = g.sum(pos);
        total = Some(match total {
            Some(t) => g.sub(t, pos)?,
            None => g.neg(pos),
        });
    }
    Ok(total.expect("two directions"))
}

/// `Σᵢ ‖xᵢ − yᵢ‖²` over corresponding rows.
pub fn l2_align(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::contract(format!(
            "l2_align of {:?} and {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// `l2_align` between every real token state and its grounded vector.
pub fn token_l2(g: &mut Graph, text: &EncodedText, vt: Var, reduction: Reduction) -> Result<Var> {
    if g.shape(vt) != g.shape(text.states) {
        return Err(Error::dim("grounded vectors must match the text states"));
    }
    let d = g.sub(text.states, vt)?;
    let sq = g.mul(d, d)?;
    let per_tok = g.sum_axis(sq, 2)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::GroupMean => 1.0 / text.batch as f64,
    };
    let w: Vec<f64> = text.pad_mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
    let w = g.constant(crate::tensor::Tensor::new(vec![text.batch, text.len], w)?);
    let per_tok = g.mul(per_tok, w)?;
    Ok(g.sum(per_tok))
}
