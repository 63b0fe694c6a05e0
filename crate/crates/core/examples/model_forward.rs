//! Runs every part of the network once on a tiny batch and prints shapes.
//!
//! `cargo run --example model_forward -p pivot-align`

use pivot_align::data::{build_corpus, Split};
use pivot_align::nn::{Forward, ModelState, TokenBatch};
use pivot_align::tensor::Graph;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let cfg = RunConfig::small();
    let corpus = build_corpus(&cfg.corpus)?;
    let state = ModelState::init(&cfg.model_for(corpus.vocab.len()), 1)?;
    println!(
        "{} parameter tensors, {} scalars",
        state.names().len(),
        state.num_scalars()
    );

    let ids = corpus.select(&corpus.languages.high.tag, Split::Train);
    let ids = &ids[..3];
    let src: Vec<Vec<usize>> = ids
        .iter()
        .map(|&i| corpus.vocab.tokenize(&corpus.samples[i].src))
        .collect();
    let images: Vec<_> = ids.iter().map(|&i| &corpus.images[i]).collect();

    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &state);
    let text = fw.encode_text(&TokenBatch::new(&src)?)?;
    let image = fw.encode_image(&images)?;
    let (grounded, weights) = fw.selective_attention(&text, image.patches)?;
    let logits = fw.decode(&TokenBatch::new(&[[1usize, 5, 6]; 3])?, &text)?;
    let one = fw.encode_text(&TokenBatch::new(&src[..1])?)?;
    let step = fw.decode_step(&[vec![1usize, 5], vec![1, 6]], &one)?;

    println!("encoder states      {:?}", g.shape(text.states));
    println!("class token         {:?}", g.shape(image.cls));
    println!("patch states        {:?}", g.shape(image.patches));
    println!(
        "selective attention {:?}, weights {:?}",
        g.shape(grounded),
        g.shape(weights)
    );
    println!("decoder logits      {:?}", g.shape(logits));
    println!("single step logits  {:?}", g.shape(step));
    Ok(())
}
