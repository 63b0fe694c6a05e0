use std::fs;
use std::sync::OnceLock;

use pivot_align::data::vocab::{BOS, EOS};
use pivot_align::data::{build_corpus, Corpus, Split, Vocabulary};
use pivot_align::eval::{
    attention_map, beam_decode, bleu, export_attention, export_sentence_reprs, overlap_score, retrieval_recall,
    sequence_score, DecodeConfig,
};
use pivot_align::nn::{EncodedText, Forward, ModelConfig, ModelState, TokenBatch};
use pivot_align::tensor::{Graph, Tensor};
use pivot_align::train::{train, TrainConfig};
use pivot_align::{Error, RunConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Trained {
    corpus: Corpus,
    state: ModelState,
}

/// A small model trained long enough to emit eos.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut rc = RunConfig::small();
        rc.corpus.n_train_high = 120;
        rc.corpus.n_train_low = 60;
        rc.corpus.n_test = 20;
        rc.corpus.n_fewshot = 10;
        let corpus = build_corpus(&rc.corpus).unwrap();
        let model = rc.model_for(corpus.vocab.len());
        let cfg = TrainConfig {
            max_epochs: 12,
            ..rc.train.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&corpus, &model, &cfg, dir.path(), false, |_| {}).unwrap();
        Trained {
            corpus,
            state: out.state,
        }
    })
}

#[test]
fn bleu_hand_computed_pair() {
    // precisions 3/4, 2/3, 1/2 and a smoothed 4-gram 1/(2·1); no brevity penalty
    let b = bleu(&["a b c d"], &["a b c e"]).unwrap();
    assert!((b - 59.460_355_750_136).abs() < 1e-6, "{b}");
}

#[test]
fn bleu_identity_and_empty() {
    let c = &trained().corpus;
    let refs: Vec<&str> = c.samples.iter().filter_map(|s| s.tgt.as_deref()).collect();
    assert_eq!(bleu(&refs, &refs).unwrap(), 100.0);
    let empty = vec![""; refs.len()];
    assert_eq!(bleu(&empty, &refs).unwrap(), 0.0);
    assert!(matches!(bleu::<&str, &str>(&[], &[]), Err(Error::Contract(_))));
    assert!(matches!(bleu(&["a"], &["a", "b"]), Err(Error::Contract(_))));
}

#[test]
fn bleu_brevity_penalty() {
    // hypothesis of 4 words against a reference of 8: BP = e^(1 − 8/4)
    let b = bleu(&["a b c d"], &["a b c d e f g h"]).unwrap();
    assert!((b - 100.0 * (-1f64).exp()).abs() < 1e-9, "{b}");
}

/// Greedy decoding that re-runs the full decoder on every prefix.
fn greedy(state: &ModelState, src: &[usize], max_steps: usize) -> Vec<usize> {
    let mut g = Graph::inference();
    let mut fw = Forward::new(&mut g, state);
    let memory: EncodedText = fw.encode_text(&TokenBatch::new(&[src]).unwrap()).unwrap();
    let mut out = vec![BOS];
    for _ in 0..max_steps {
        let logits = fw.decode(&TokenBatch::new(&[&out]).unwrap(), &memory).unwrap();
        let v = fw.g.shape(logits)[2];
        let last = &fw.g.value(logits).data()[(out.len() - 1) * v..out.len() * v];
        let mut best = EOS;
        for t in 0..v {
            let ok = t == EOS || !Vocabulary::is_special(t);
            if ok && last[t] > last[best] {
                best = t;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
    }
    out.remove(0);
    out
}

#[test]
fn beam_of_one_is_greedy() {
    let t = trained();
    let cfg = DecodeConfig {
        beam_size: 1,
        ..DecodeConfig::default()
    };
    for &i in t.corpus.select("de", Split::Test).iter().take(10) {
        let src = t.corpus.vocab.tokenize(&t.corpus.samples[i].src);
        assert_eq!(beam_decode(&t.state, &src, &cfg).unwrap(), greedy(&t.state, &src, 15));
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let t = trained();
    let beam = DecodeConfig::default();
    let one = DecodeConfig {
        beam_size: 1,
        ..beam.clone()
    };
    let mut compared = 0;
    for lang in ["de", "fr", "cs"] {
        for &i in t.corpus.select(lang, Split::Test).iter().take(8) {
            let src = t.corpus.vocab.tokenize(&t.corpus.samples[i].src);
            let b = beam_decode(&t.state, &src, &beam).unwrap();
            let g = beam_decode(&t.state, &src, &one).unwrap();
            assert_eq!(b, beam_decode(&t.state, &src, &beam).unwrap());
            // only eos-terminated outputs have a comparable sequence score
            if b.len() < beam.max_decode_len && g.len() < beam.max_decode_len {
                let (sb, sg) = (
                    sequence_score(&t.state, &src, &b).unwrap(),
                    sequence_score(&t.state, &src, &g).unwrap(),
                );
                assert!(sb >= sg - 1e-12, "{sb} < {sg}");
                compared += 1;
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn single_token_vocabulary_repeats_that_token() {
    let cfg = ModelConfig {
        vocab_size: 5,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_img_layers: 1,
        ..ModelConfig::default()
    };
    let state = ModelState::init(&cfg, 3).unwrap();
    let dc = DecodeConfig {
        max_decode_len: 6,
        ..DecodeConfig::default()
    };
    let out = beam_decode(&state, &[4, 4], &dc).unwrap();
    assert!(out.len() <= 6);
    assert!(out.iter().all(|&t| t == 4), "{out:?}");
}

#[test]
fn zero_beam_is_a_config_error() {
    let t = trained();
    let cfg = DecodeConfig {
        beam_size: 0,
        ..DecodeConfig::default()
    };
    assert!(matches!(beam_decode(&t.state, &[4], &cfg), Err(Error::Config(_))));
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn self_retrieval_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 30, 8);
    let r = retrieval_recall(&x, &x, &[1, 5, 10]).unwrap();
    assert_eq!(r, vec![(1, 100.0), (5, 100.0), (10, 100.0)]);
    assert!(matches!(retrieval_recall(&x, &x, &[30]), Err(Error::Contract(_))));
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let (n, seeds) = (100, 50);
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v) = (random_matrix(&mut rng, n, 64), random_matrix(&mut rng, n, 64));
        total += retrieval_recall(&t, &v, &[1]).unwrap()[0].1;
    }
    let mean = total / seeds as f64;
    // per seed, R@1 in percent is ~ 100·Binomial(n, 1/n)/n
    let p = 1.0 / n as f64;
    let sigma = 100.0 * (p * (1.0 - p) / n as f64).sqrt() / (seeds as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean R@1 {mean}");
}

#[test]
fn attention_export_formats() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let i = t.corpus.select("fr", Split::Test)[0];
    let map = export_attention(&t.state, &t.corpus, i, dir.path()).unwrap();
    let id = &t.corpus.samples[i].id;
    let csv = fs::read_to_string(dir.path().join(format!("{id}.attn.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 1 + 9);
    let mut rows = 0;
    for line in lines {
        let total: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() <= 1e-9);
        rows += 1;
    }
    assert_eq!(rows, map.tokens.len());
    for j in 0..rows {
        let pgm = fs::read(dir.path().join(format!("{id}.tok{j}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n24 24\n255\n"));
        assert_eq!(pgm.len(), b"P5\n24 24\n255\n".len() + 24 * 24);
    }
    let again = attention_map(&t.state, &t.corpus, i).unwrap();
    assert_eq!(again.weights, map.weights);
}

#[test]
fn representation_export_shape_and_determinism() {
    let t = trained();
    let c = &t.corpus;
    let mut items = Vec::new();
    for lang in ["de", "fr", "cs"] {
        for &i in c.select(lang, Split::Test).iter().take(5) {
            items.push((lang.to_string(), c.vocab.tokenize(&c.samples[i].src)));
        }
    }
    items.push(items[0].clone());
    let ex = export_sentence_reprs(&t.state, &items).unwrap();
    let d = t.state.config().d_model;
    assert_eq!(ex.reprs.shape(), &[items.len(), d]);
    assert_eq!(ex.projection.shape(), &[items.len(), 2]);
    assert_eq!(ex.reprs.row(0), ex.reprs.row(items.len() - 1));
    let csv = ex.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), items.len() + 1);
    assert!(lines.iter().all(|l| l.split(',').count() == 1 + d + 2));
    assert!(ex.overlap > 0.0 && ex.overlap.is_finite());
}

#[test]
fn overlap_score_oracle() {
    // two 1-d clusters: {0, 2} and {10, 12}; centroids 1 and 11, dispersion 1
    let x = Tensor::new(vec![4, 1], vec![0.0, 2.0, 10.0, 12.0]).unwrap();
    let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
    assert!((overlap_score(&x, &labels).unwrap() - 10.0).abs() < 1e-12);
    assert!(overlap_score(&x, &labels[..3]).is_err());
}

proptest! {
    #[test]
    fn bleu_is_order_invariant(seed in 0u64..500) {
        let c = &trained().corpus;
        let refs: Vec<&str> = c.samples.iter().filter_map(|s| s.tgt.as_deref()).take(12).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyps: Vec<&str> = (0..refs.len()).map(|_| refs[rng.random_range(0..refs.len())]).collect();
        let mut idx: Vec<usize> = (0..refs.len()).collect();
        idx.reverse();
        idx.rotate_left(seed as usize % refs.len());
        let h2: Vec<&str> = idx.iter().map(|&i| hyps[i]).collect();
        let r2: Vec<&str> = idx.iter().map(|&i| refs[i]).collect();
        let (a, b) = (bleu(&hyps, &refs).unwrap(), bleu(&h2, &r2).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..1000, n in 12usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v) = (random_matrix(&mut rng, n, 4), random_matrix(&mut rng, n, 4));
        let r = retrieval_recall(&t, &v, &[1, 5, 10]).unwrap();
        prop_assert!(r[0].1 <= r[1].1 && r[1].1 <= r[2].1);
        prop_assert!(r.iter().all(|&(_, x)| (0.0..=100.0).contains(&x)));
    }
}
