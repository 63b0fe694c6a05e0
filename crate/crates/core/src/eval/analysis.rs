use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::image::encode_pgm;
use crate::data::{Corpus, Image};
use crate::error::{Error, Result};
use crate::nn::{Forward, ModelState, TokenBatch};
use crate::objectives::sentence_repr;
use crate::tensor::{Graph, Tensor};

const CHUNK: usize = 128;

/// Mean-pooled source-encoder outputs, one row per sequence.
pub fn encode_sentences(state: &ModelState, seqs: &[Vec<usize>]) -> Result<Tensor> {
    let d = state.config().d_model;
    let mut out = Vec::with_capacity(seqs.len() * d);
    for chunk in seqs.chunks(CHUNK) {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, state);
        let text = fw.encode_text(&TokenBatch::new(chunk)?)?;
        let r = sentence_repr(fw.g, &text)?;
        out.extend_from_slice(fw.g.value(r).data());
    }
    Tensor::new(vec![seqs.len(), d], out)
}

/// Class-token vectors of the image encoder, one row per image.
pub fn encode_images(state: &ModelState, images: &[&Image]) -> Result<Tensor> {
    let d = state.config().d_model;
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(CHUNK) {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, state);
        let enc = fw.encode_image(chunk)?;
        out.extend_from_slice(fw.g.value(enc.cls).data());
    }
    Tensor::new(vec![images.len(), d], out)
}

/// Selective-attention weights of one caption over its image's patches.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub tokens: Vec<String>,
    /// `tokens × patches`.
    pub weights: Tensor,
}

pub fn attention_map(state: &ModelState, corpus: &Corpus, sample: usize) -> Result<AttentionMap> {
    let s = corpus
        .samples
        .get(sample)
        .ok_or_else(|| Error::contract(format!("no sample {sample}")))?;
    let ids = corpus.vocab.tokenize(&s.src);
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, state);
    let text = fw.encode_text(&TokenBatch::new(&[&ids])?)?;
    let img = fw.encode_image(&[&corpus.images[sample]])?;
    let (_, w) = fw.selective_attention(&text, img.patches)?;
    let m = state.config().n_patches();
    Ok(AttentionMap {
        tokens: s.src.split_whitespace().map(str::to_string).collect(),
        weights: fw.g.value(w).reshaped(vec![ids.len(), m])?,
    })
}

impl AttentionMap {
    pub fn to_csv(&self) -> String {
        let m = self.weights.shape()[1];
        let mut s = String::from("token");
        for p in 0..m {
            let _ = write!(s, ",p{p}");
        }
        s.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            for v in self.weights.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Heat map of token `i` at image resolution, scaled so the strongest
    /// patch is white.
    pub fn heat_pgm(&self, i: usize, image_side: usize, patch_side: usize) -> Vec<u8> {
        let row = self.weights.row(i);
        let max = row.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
        let per = image_side / patch_side;
        let mut px = vec![0.0; image_side * image_side];
        for y in 0..image_side {
            for x in 0..image_side {
                px[y * image_side + x] = row[(y / patch_side) * per + x / patch_side] / max;
            }
        }
        encode_pgm(image_side, image_side, &px)
    }

    /// Patch index with the largest weight for token `i`.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.weights.row(i);
        (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
    }
}

/// Writes `<id>.attn.csv` and one `<id>.tok<j>.pgm` per token into `dir`.
pub fn export_attention(state: &ModelState, corpus: &Corpus, sample: usize, dir: &Path) -> Result<AttentionMap> {
    let map = attention_map(state, corpus, sample)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &corpus.samples[sample].id;
    let path = dir.join(format!("{id}.attn.csv"));
    fs::write(&path, map.to_csv()).map_err(|e| Error::io(&path, e))?;
    let cfg = state.config();
    for j in 0..map.tokens.len() {
        let path = dir.join(format!("{id}.tok{j}.pgm"));
        fs::write(&path, map.heat_pgm(j, cfg.image_side, cfg.patch_side)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(map)
}

/// Grid cells holding an object, in increasing order, read off the pixels.
fn occupied_cells(img: &Image, patch: usize) -> Vec<usize> {
    let per = img.side() / patch;
    (0..per * per)
        .filter(|&c| {
            let (ox, oy) = ((c % per) * patch, (c / per) * patch);
            (0..patch).any(|y| (0..patch).any(|x| img.get(ox + x, oy + y) != [1.0, 1.0, 1.0]))
        })
        .collect()
}

/// Fraction of shape words whose strongest patch is the cell of the object
/// they name.
pub fn attention_grounding(state: &ModelState, corpus: &Corpus, samples: &[usize]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for &i in samples {
        let s = &corpus.samples[i];
        let lang = corpus
            .languages
            .get(&s.lang)
            .ok_or_else(|| Error::Data(format!("unknown language {}", s.lang)))?;
        let cells = occupied_cells(&corpus.images[i], state.config().patch_side);
        let map = attention_map(state, corpus, i)?;
        let mut object = 0;
        for (j, w) in map.tokens.iter().enumerate() {
            if lang.shapes.contains(w) {
                if let Some(&cell) = cells.get(object) {
                    hits += usize::from(map.argmax(j) == cell);
                    total += 1;
                }
                object += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::contract("no shape words to score"));
    }
    Ok(hits as f64 / total as f64)
}

/// Projection onto the top two principal components. Each component's sign
/// is fixed so its largest-magnitude entry is positive.
pub fn pca2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] < 2 {
        return Err(Error::dim("pca2 expects an N × d matrix with d ≥ 2"));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; n * 2];
    for (k, &col) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(col).into_owned();
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |b, e| if e.abs() > b.abs() { e } else { b });
        if big < 0.0 {
            v = -v;
        }
        let proj = &c * v;
        for i in 0..n {
            out[i * 2 + k] = proj[i];
        }
    }
    Tensor::new(vec![n, 2], out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance between language centroids divided by the mean distance
/// of points to their own language's centroid. Lower means the languages
/// overlap more.
pub fn overlap_score(reprs: &Tensor, labels: &[String]) -> Result<f64> {
    if reprs.rank() != 2 || reprs.shape()[0] != labels.len() {
        return Err(Error::dim("one label per representation row required"));
    }
    let d = reprs.shape()[1];
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::contract("overlap needs at least two languages"));
    }
    let centroids: Vec<Vec<f64>> = groups
        .values()
        .map(|rows| {
            let mut c = vec![0.0; d];
            for &i in rows {
                c.iter_mut().zip(reprs.row(i)).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|a| *a /= rows.len() as f64);
            c
        })
        .collect();
    let intra: f64 = groups
        .values()
        .zip(&centroids)
        .map(|(rows, c)| rows.iter().map(|&i| dist(reprs.row(i), c)).sum::<f64>() / rows.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    let mut inter = Vec::new();
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter.push(dist(&centroids[a], &centroids[b]));
        }
    }
    let inter = inter.iter().sum::<f64>() / inter.len() as f64;
    if intra == 0.0 {
        return Err(Error::Domain("languages have zero dispersion".into()));
    }
    Ok(inter / intra)
}

/// Pooled sentence representations with language labels, their 2-D
/// projection and the overlap score.
#[derive(Clone, Debug)]
pub struct ReprExport {
    pub labels: Vec<String>,
    pub reprs: Tensor,
    pub projection: Tensor,
    pub overlap: f64,
}

pub fn export_sentence_reprs(state: &ModelState, items: &[(String, Vec<usize>)]) -> Result<ReprExport> {
    let seqs: Vec<Vec<usize>> = items.iter().map(|(_, s)| s.clone()).collect();
    let labels: Vec<String> = items.iter().map(|(l, _)| l.clone()).collect();
    let reprs = encode_sentences(state, &seqs)?;
    Ok(ReprExport {
        projection: pca2(&reprs)?,
        overlap: overlap_score(&reprs, &labels)?,
        labels,
        reprs,
    })
}

impl ReprExport {
    pub fn to_csv(&self) -> String {
        let d = self.reprs.shape()[1];
        let mut s = String::from("lang");
        for k in 0..d {
            let _ = write!(s, ",h{k}");
        }
        s.push_str(",pc1,pc2\n");
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(l);
            for v in self.reprs.row(i).iter().chain(self.projection.row(i)) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_recovers_dominant_axis() {
        let x = Tensor::new(
            vec![4, 3],
            vec![3.0, 0.1, 0.0, -3.0, -0.1, 0.0, 1.0, 0.0, 0.2, -1.0, 0.0, -0.2],
        )
        .unwrap();
        let p = pca2(&x).unwrap();
        assert!((p.row(0)[0].abs() - (9.0f64 + 0.01).sqrt()).abs() < 1e-2);
        assert!(p.row(0)[1].abs() < 0.2);
    }

    #[test]
    fn separated_clusters_score_high() {
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let far = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0]).unwrap();
        let near = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 0.1, 0.0, 0.1, 1.0]).unwrap();
        assert!((overlap_score(&far, &labels).unwrap() - 20.0).abs() < 1e-12);
        assert!(overlap_score(&near, &labels).unwrap() < 1.0);
    }
}
