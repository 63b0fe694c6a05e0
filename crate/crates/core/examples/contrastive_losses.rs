//! Evaluates the alignment objectives on hand-made embeddings and shows how
//! the temperature shapes the contrastive loss.
//!
//! `cargo run --example contrastive_losses -p pivot-align`

use pivot_align::nn::EncodedText;
use pivot_align::objectives::{info_nce, l2_align, sentence_contrast, token_contrast, ContrastGroup, Reduction};
use pivot_align::tensor::{Graph, Tensor};

fn main() -> pivot_align::Result<()> {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::eye(3));
    let anti = g.constant(Tensor::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0],
    ])?);

    // Orthonormal, correctly paired rows: each positive has logit 1/tau and
    // each negative 0, so the loss is 3 ln(e^{1/tau} + 2) - 3/tau.
    for tau in [1.0, 0.1, 0.007] {
        let l = info_nce(&mut g, eye, eye, tau)?;
        let l_shift = info_nce(&mut g, eye, anti, tau)?;
        println!(
            "tau {tau:<6} matched {:>10.6}  mismatched {:>10.4}",
            g.value(l).item(),
            g.value(l_shift).item()
        );
    }

    let group = ContrastGroup { text: eye, image: eye };
    let s = sentence_contrast(&mut g, &[group, group], 1.0, Reduction::Sum)?;
    println!("sentence contrast over two identical groups: {:.6}", g.value(s).item());

    let states = g.constant(Tensor::eye(3).reshaped([1, 3, 3])?);
    let text = EncodedText {
        states,
        pad_mask: vec![true; 3],
        batch: 1,
        len: 3,
    };
    let t = token_contrast(&mut g, &text, states, 1.0, Reduction::Sum)?;
    println!("token contrast, one sentence of three tokens: {:.6}", g.value(t).item());

    let l2 = l2_align(&mut g, eye, anti)?;
    println!("squared distance between the two pairings: {}", g.value(l2).item());
    Ok(())
}
