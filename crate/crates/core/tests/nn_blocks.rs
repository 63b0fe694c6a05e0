use pivot_align::data::Image;
use pivot_align::nn::{model_grad_check, EncodedText, Forward, ModelConfig, ModelState, TokenBatch};
use pivot_align::tensor::{Graph, Tensor};
use pivot_align::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_img_layers: 1,
        vocab_size: 12,
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn model() -> ModelState {
    ModelState::init(&tiny(), 5).unwrap()
}

fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_pixels(24, (0..24 * 24 * 3).map(|_| rng.random()).collect()).unwrap()
}

fn rows(t: &Tensor, n: usize) -> Vec<Vec<f64>> {
    t.data().chunks(t.numel() / n).map(<[f64]>::to_vec).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn config_rejects_indivisible_shapes() {
    let bad_heads = ModelConfig { n_heads: 3, ..tiny() };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let bad_patch = ModelConfig {
        patch_side: 7,
        ..tiny()
    };
    assert!(matches!(bad_patch.validate(), Err(Error::Config(_))));
    let ok = tiny();
    assert_eq!(ok.d_k() * ok.n_heads, ok.d_model);
}

#[test]
fn embedding_is_deterministic_and_positional() {
    let m = model();
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let a = fw.embed_tokens(&TokenBatch::new(&[[5usize, 5]]).unwrap()).unwrap();
    let b = fw.embed_tokens(&TokenBatch::new(&[[5usize, 5]]).unwrap()).unwrap();
    let c = fw.embed_tokens(&TokenBatch::new(&[[7usize, 7]]).unwrap()).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    // Same id at positions 0 and 1: the difference is the positional term,
    // which does not depend on the id.
    let d = 8;
    let diff = |t: &Tensor| -> Vec<f64> { (0..d).map(|j| t.data()[j] - t.data()[d + j]).collect() };
    assert!(close(&diff(g.value(a)), &diff(g.value(c)), 1e-12));
    assert!(diff(g.value(a)).iter().any(|v| v.abs() > 1e-3));
    assert!(TokenBatch::new(&[Vec::<usize>::new()]).is_err());
}

#[test]
fn embedding_rejects_out_of_range_and_overlong_input() {
    let m = model();
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let r = fw.embed_tokens(&TokenBatch::new(&[[12usize]]).unwrap());
    assert!(matches!(r, Err(Error::Vocabulary { id: 12, size: 12 })));
    let r = fw.embed_tokens(&TokenBatch::new(&[vec![4usize; 9]]).unwrap());
    assert!(matches!(r, Err(Error::Length { len: 9, max: 8 })));
}

#[test]
fn single_key_attention_ignores_the_query() {
    let m = model();
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fw = Forward::new(&mut g, &m);
    let q =
        fw.g.constant(Tensor::new(vec![1, 3, 8], (0..24).map(|_| rng.random()).collect()).unwrap());
    let kv =
        fw.g.constant(Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.random()).collect()).unwrap());
    let (out, w) = fw.encoder_attention(0, q, kv, &[true; 3]).unwrap();
    let r = rows(g.value(out), 3);
    assert!(close(&r[0], &r[1], 1e-12) && close(&r[0], &r[2], 1e-12));
    assert!(g.value(w).data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn attention_rows_sum_to_one_and_causal_mask_blocks_the_future() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y = x.clone();
    for v in &mut y[16..] {
        *v += 1.0;
    }
    let causal: Vec<bool> = (0..4).flat_map(|i| (0..4).map(move |j| j <= i)).collect();
    let run = |data: Vec<f64>| {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, &m);
        let x = fw.g.constant(Tensor::new(vec![1, 4, 8], data).unwrap());
        let (out, w) = fw.encoder_attention(0, x, x, &causal).unwrap();
        (g.value(out).clone(), g.value(w).clone())
    };
    let (a, w) = run(x);
    let (b, _) = run(y);
    for r in w.data().chunks(4) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Positions 0 and 1 see only inputs 0 and 1, which did not change.
    assert!(close(&a.data()[..16], &b.data()[..16], 1e-12));
    assert!(!close(&a.data()[16..], &b.data()[16..], 1e-6));
}

#[test]
fn encoder_shapes_and_padding() {
    let m = model();
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let t = fw.encode_text(&TokenBatch::new(&[[4usize, 5, 6]]).unwrap()).unwrap();
    assert_eq!(g.shape(t.states), &[1, 3, 8]);

    let run = |pad_id: usize| {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, &m);
        let b = TokenBatch::with_mask(vec![4, 5, pad_id, pad_id], vec![true, true, false, false], 1).unwrap();
        let t = fw.encode_text(&b).unwrap();
        g.value(t.states).data()[..16].to_vec()
    };
    assert!(close(&run(0), &run(9), 1e-12));
}

#[test]
fn different_sentences_pool_differently() {
    let m = model();
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let t = fw
        .encode_text(&TokenBatch::new(&[[4usize, 5], [6, 7]]).unwrap())
        .unwrap();
    let s = pivot_align::objectives::sentence_repr(fw.g, &t).unwrap();
    let r = rows(g.value(s), 2);
    assert!(!close(&r[0], &r[1], 1e-6));
}

#[test]
fn encoding_has_no_language_branch() {
    // Sentences from two languages batched together encode exactly as they
    // do alone: one parameter set, one code path.
    let m = model();
    let enc = |seqs: &[Vec<usize>]| {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, &m);
        let t = fw.encode_text(&TokenBatch::new(seqs).unwrap()).unwrap();
        g.value(t.states).data().to_vec()
    };
    let a = vec![4usize, 5, 6];
    let b = vec![9usize, 10, 11];
    let both = enc(&[a.clone(), b.clone()]);
    assert!(close(&both[..24], &enc(&[a]), 1e-12));
    assert!(close(&both[24..], &enc(&[b]), 1e-12));
}

#[test]
fn image_encoder_shapes_and_sensitivity() {
    let m = model();
    let white = Image::filled(24, [1.0; 3]);
    let black = Image::filled(24, [0.0; 3]);
    let img = random_image(3);
    // Swap the first two 8×8 tiles.
    let mut swapped = img.clone();
    for y in 0..8 {
        for x in 0..8 {
            let (a, b) = (img.get(x, y), img.get(x + 8, y));
            swapped.set(x, y, b);
            swapped.set(x + 8, y, a);
        }
    }
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let e = fw.encode_image(&[&white, &black, &img, &swapped]).unwrap();
    assert_eq!(g.shape(e.cls), &[4, 8]);
    assert_eq!(g.shape(e.patches), &[4, 9, 8]);
    let cls = rows(g.value(e.cls), 4);
    assert!(!close(&cls[0], &cls[1], 1e-6));
    assert!(!close(&cls[2], &cls[3], 1e-6));
}

#[test]
fn decoder_is_causal_and_reads_the_encoder() {
    let m = model();
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let mem = fw.encode_text(&TokenBatch::new(&[[4usize, 5, 6]]).unwrap()).unwrap();
    let short = fw.decode_step(&[vec![1usize, 7]], &mem).unwrap();
    assert_eq!(g.shape(short), &[1, 12]);
    let mut fw = Forward::new(&mut g, &m);
    let long = fw
        .decode(&TokenBatch::new(&[[1usize, 7, 8, 9]]).unwrap(), &mem)
        .unwrap();
    let v = 12;
    assert!(close(g.value(short).data(), &g.value(long).data()[v..2 * v], 1e-12));

    let zeros = g.constant(Tensor::zeros(vec![1, 3, 8]));
    let blank = EncodedText {
        states: zeros,
        ..mem.clone()
    };
    let mut fw = Forward::new(&mut g, &m);
    let other = fw.decode_step(&[vec![1usize, 7]], &blank).unwrap();
    assert!(!close(g.value(short).data(), g.value(other).data(), 1e-6));
}

#[test]
fn selective_attention_special_cases() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, &m);
    let text = fw.encode_text(&TokenBatch::new(&[[4usize, 5, 6]]).unwrap()).unwrap();
    let wv = fw.g.constant(m.param("select.w_v").unwrap().clone());

    let one: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p1 = fw.g.constant(Tensor::new(vec![1, 1, 8], one.clone()).unwrap());
    let (out, w) = fw.selective_attention(&text, p1).unwrap();
    let want = fw.g.matmul(p1, wv).unwrap();
    let want = g.value(want).data().to_vec();
    for r in rows(g.value(out), 3) {
        assert!(close(&r, &want, 1e-12));
    }
    assert!(g.value(w).data().iter().all(|&x| (x - 1.0).abs() < 1e-12));

    let mut fw = Forward::new(&mut g, &m);
    let same = fw.g.constant(Tensor::new(vec![1, 4, 8], one.repeat(4)).unwrap());
    let (out, w) = fw.selective_attention(&text, same).unwrap();
    for r in rows(g.value(out), 3) {
        assert!(close(&r, &want, 1e-12));
    }
    for r in g.value(w).data().chunks(4) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_passes_pass_gradient_check() {
    let m = model();
    let img = random_image(4);
    let err = model_grad_check(
        &m,
        |fw| {
            let text = fw.encode_text(&TokenBatch::new(&[vec![4usize, 5, 6], vec![7, 8]])?)?;
            let image = fw.encode_image(&[&img, &img])?;
            let (vt, _) = fw.selective_attention(&text, image.patches)?;
            let logits = fw.decode(&TokenBatch::new(&[[1usize, 9], [1, 10]])?, &text)?;
            let a = fw.g.mean(vt);
            let b = fw.g.mean(logits);
            let c = fw.g.mean(image.cls);
            let ab = fw.g.add(a, b)?;
            let s = fw.g.add(ab, c)?;
            fw.g.mul(s, s)
        },
        1e-5,
        Some(4),
        1,
        |_| true,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_prefix_logits_are_stable(
        prefix in prop::collection::vec(4usize..12, 1..4),
        ext in prop::collection::vec(4usize..12, 1..3),
    ) {
        let m = model();
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, &m);
        let mem = fw.encode_text(&TokenBatch::new(&[[4usize, 5]]).unwrap()).unwrap();
        let p: Vec<usize> = std::iter::once(1).chain(prefix).collect();
        let full: Vec<usize> = p.iter().chain(&ext).copied().collect();
        let a = fw.decode(&TokenBatch::new(std::slice::from_ref(&p)).unwrap(), &mem).unwrap();
        let b = fw.decode(&TokenBatch::new(&[full]).unwrap(), &mem).unwrap();
        let n = p.len() * 12;
        prop_assert!(close(g.value(a).data(), &g.value(b).data()[..n], 1e-12));
    }

    #[test]
    fn selective_attention_is_permutation_equivariant(seed in 0u64..1000) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..9 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..9).collect();
        for i in (1..9).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| data[p * 8..(p + 1) * 8].to_vec()).collect();
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, &m);
        let text = fw.encode_text(&TokenBatch::new(&[[4usize, 5, 6]]).unwrap()).unwrap();
        let a = fw.g.constant(Tensor::new(vec![1, 9, 8], data).unwrap());
        let b = fw.g.constant(Tensor::new(vec![1, 9, 8], permuted).unwrap());
        let (oa, _) = fw.selective_attention(&text, a).unwrap();
        let (ob, _) = fw.selective_attention(&text, b).unwrap();
        prop_assert!(close(g.value(oa).data(), g.value(ob).data(), 1e-12));
    }
}
