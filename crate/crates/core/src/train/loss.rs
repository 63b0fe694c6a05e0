use super::batch::{Batch, Prepared};
use super::TrainConfig;
use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{EncodedImage, EncodedText, Forward, TokenBatch};
use crate::objectives::{
    cross_entropy, l2_align, sentence_contrast, sentence_repr, sentence_repr_image, token_contrast, token_l2,
    ContrastGroup, Reduction,
};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Finetune => "finetune",
        }
    }
}

/// Unweighted loss terms of one step. `s_ctr` and `t_ctr` are sums over
/// groups of within-group means; `l2` holds the replacement terms of the
/// L2 ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub ce: f64,
    pub s_ctr: f64,
    pub t_ctr: f64,
    pub l2: f64,
}

/// `coarse = ce + λ_s·s_ctr`; `fine = coarse + λ_t·t_ctr` in stage 2 and
/// `fine == coarse` otherwise.
pub struct LossParts {
    pub coarse: Var,
    pub fine: Var,
    pub components: Components,
}

/// Decoder input `[bos] y` and output `y [eos]` for each reference.
fn teacher_forcing(refs: &[&[usize]]) -> Result<(TokenBatch, Vec<usize>)> {
    let inputs: Vec<Vec<usize>> = refs
        .iter()
        .map(|y| std::iter::once(BOS).chain(y.iter().copied()).collect())
        .collect();
    let tb = TokenBatch::new(&inputs)?;
    let mut out = vec![0; tb.batch * tb.len];
    for (b, y) in refs.iter().enumerate() {
        for (j, &t) in y.iter().chain(std::iter::once(&EOS)).enumerate() {
            out[b * tb.len + j] = t;
        }
    }
    Ok((tb, out))
}

fn text_batch(data: &Prepared, ids: &[usize], target: bool) -> Result<TokenBatch> {
    let seqs: Vec<&[usize]> = ids
        .iter()
        .map(|&i| {
            if target {
                data.tgt[i].as_deref().expect("parallel sample has a reference")
            } else {
                data.src[i].as_slice()
            }
        })
        .collect();
    TokenBatch::new(&seqs)
}

fn images(fw: &mut Forward, data: &Prepared, ids: &[usize]) -> Result<EncodedImage> {
    let imgs: Vec<_> = ids.iter().map(|&i| &data.corpus.images[i]).collect();
    fw.encode_image(&imgs)
}

/// Computes both stage objectives of one batch. Terms whose weight is zero
/// are not evaluated and log as zero.
pub fn batch_loss(
    fw: &mut Forward,
    data: &Prepared,
    batch: &Batch,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<LossParts> {
    let par = &batch.parallel;
    if par.is_empty() {
        return Err(Error::Config("batch has no parallel pairs for cross-entropy".into()));
    }
    if par.iter().any(|&i| data.tgt[i].is_none()) {
        return Err(Error::Config("cross-entropy sample without a reference".into()));
    }
    let cc = &cfg.contrast;
    let x = text_batch(data, par, false)?;
    let hx = fw.encode_text(&x)?;
    let refs: Vec<&[usize]> = par.iter().map(|&i| data.tgt[i].as_deref().unwrap()).collect();
    let (dec_in, dec_out) = teacher_forcing(&refs)?;
    let logits = fw.decode(&dec_in, &hx)?;
    let ce = cross_entropy(fw.g, logits, &dec_out, &dec_in.mask, cfg.label_smoothing)?;
    let mut comp = Components {
        ce: fw.g.value(ce).item(),
        ..Components::default()
    };

    let token_level = stage == Stage::Two && cc.lambda_t > 0.0;
    if stage == Stage::Finetune || (cc.lambda_s == 0.0 && !token_level) {
        return Ok(LossParts {
            coarse: ce,
            fine: ce,
            components: comp,
        });
    }

    let mut groups: Vec<(EncodedText, EncodedImage)> = Vec::new();
    let img_par = images(fw, data, par)?;
    groups.push((hx, img_par));
    if cc.include_target_contrast {
        let y = text_batch(data, par, true)?;
        groups.push((fw.encode_text(&y)?, img_par));
    }
    for ids in batch.captions.iter().filter(|ids| !ids.is_empty()) {
        let t = text_batch(data, ids, false)?;
        let text = fw.encode_text(&t)?;
        groups.push((text, images(fw, data, ids)?));
    }

    let mut sentence = Vec::with_capacity(groups.len());
    for (text, img) in &groups {
        sentence.push(ContrastGroup {
            text: sentence_repr(fw.g, text)?,
            image: sentence_repr_image(img),
        });
    }
    let s_term = if cfg.use_l2_loss {
        let mut acc: Option<Var> = None;
        for grp in &sentence {
            let m = fw.g.shape(grp.text)[0] as f64;
            let l = l2_align(fw.g, grp.text, grp.image)?;
            let l = fw.g.scale(l, 1.0 / m);
            acc = Some(match acc {
                Some(a) => fw.g.add(a, l)?,
                None => l,
            });
        }
        let s = acc.expect("at least one group");
        comp.l2 = fw.g.value(s).item();
        s
    } else {
        let s = sentence_contrast(fw.g, &sentence, cc.tau_s, Reduction::GroupMean)?;
        comp.s_ctr = fw.g.value(s).item();
        s
    };
    let weighted = fw.g.scale(s_term, cc.lambda_s);
    let coarse = fw.g.add(ce, weighted)?;
    if !token_level {
        return Ok(LossParts {
            coarse,
            fine: coarse,
            components: comp,
        });
    }

    let mut t_acc: Option<Var> = None;
    for (text, img) in &groups {
        let (vt, _) = fw.selective_attention(text, img.patches)?;
        let t = if cfg.use_l2_loss {
            token_l2(fw.g, text, vt, Reduction::GroupMean)?
        } else {
            token_contrast(fw.g, text, vt, cc.tau_t, Reduction::GroupMean)?
        };
        t_acc = Some(match t_acc {
            Some(a) => fw.g.add(a, t)?,
            None => t,
        });
    }
    let t_term = t_acc.expect("at least one group");
    let t_val = fw.g.value(t_term).item();
    if cfg.use_l2_loss {
        comp.l2 += t_val;
    } else {
        comp.t_ctr = t_val;
    }
    let weighted = fw.g.scale(t_term, cc.lambda_t);
    let fine = fw.g.add(coarse, weighted)?;
    Ok(LossParts {
        coarse,
        fine,
        components: comp,
    })
}

/// `ce + λ_s·Σ s-ctr` over the batch's groups.
pub fn stage1_loss(fw: &mut Forward, data: &Prepared, batch: &Batch, cfg: &TrainConfig) -> Result<(Var, Components)> {
    let p = batch_loss(fw, data, batch, cfg, Stage::One)?;
    Ok((p.coarse, p.components))
}

/// Stage-1 loss plus `λ_t·Σ t-ctr`.
pub fn stage2_loss(fw: &mut Forward, data: &Prepared, batch: &Batch, cfg: &TrainConfig) -> Result<(Var, Components)> {
    let p = batch_loss(fw, data, batch, cfg, Stage::Two)?;
    Ok((p.fine, p.components))
}
