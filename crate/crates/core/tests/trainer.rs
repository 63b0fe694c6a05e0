use std::fs;
use std::path::{Path, PathBuf};

use pivot_align::data::{build_corpus, Corpus};
use pivot_align::nn::{ModelConfig, ModelState, ParamTable};
use pivot_align::tensor::Tensor;
use pivot_align::train::{
    adam_step, average_checkpoints, checkpoint_path, finetune, lr_at, sample_pairs, train, AdamConfig, Mode,
    OptimizerState, Stage, TrainConfig, LOG_HEADER,
};
use pivot_align::{Error, RunConfig};
use proptest::prelude::*;

struct Setup {
    corpus: Corpus,
    model: ModelConfig,
    train: TrainConfig,
}

fn setup() -> Setup {
    let mut rc = RunConfig::small();
    rc.corpus.n_train_high = 60;
    rc.corpus.n_train_low = 60;
    rc.corpus.n_test = 10;
    rc.corpus.n_fewshot = 20;
    let corpus = build_corpus(&rc.corpus).unwrap();
    let model = rc.model_for(corpus.vocab.len());
    let mut train = rc.train.clone();
    train.max_epochs = 4;
    train.finetune_epochs = 2;
    Setup { corpus, model, train }
}

fn run(s: &Setup, cfg: &TrainConfig, dir: &Path) -> pivot_align::train::TrainOutcome {
    train(&s.corpus, &s.model, cfg, dir, false, |_| {}).unwrap()
}

#[test]
fn schedule_landmarks() {
    let (peak, w) = (5e-4, 200);
    assert!((lr_at(w, peak, w) - peak).abs() < 1e-18);
    assert!((lr_at(w / 2, peak, w) - peak / 2.0).abs() < 1e-18);
    assert!((lr_at(4 * w, peak, w) - peak / 2.0).abs() < 1e-18);
    assert!(lr_at(1, peak, w) > 0.0);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = AdamConfig::default();
    for g in [3.0, -0.02, 250.0] {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = OptimizerState::new(&p);
        adam_step(&mut p, &mut opt, &[&[g]], 0.01, &cfg).unwrap();
        // m̂ = g and v̂ = g² after bias correction
        let want = 1.0 - 0.01 * g / (g.abs() + cfg.eps);
        assert!((p[0].item() - want).abs() < 1e-15, "g={g}");
        assert_eq!(opt.step, 1);
    }
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut p = vec![Tensor::from_vec(vec![0.5, -2.0])];
    let mut opt = OptimizerState::new(&p);
    for _ in 0..3 {
        adam_step(&mut p, &mut opt, &[&[0.0, 0.0]], 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p[0].data(), &[0.5, -2.0]);
    assert_eq!(opt.step, 3);
}

#[test]
fn non_finite_steps_leave_state_untouched() {
    let cfg = AdamConfig::default();
    let mut p = vec![Tensor::from_vec(vec![1.0, 2.0]), Tensor::scalar(3.0)];
    let mut opt = OptimizerState::new(&p);
    adam_step(&mut p, &mut opt, &[&[0.1, 0.2], &[0.3]], 0.01, &cfg).unwrap();
    let (p0, o0) = (p.clone(), opt.clone());
    let err = adam_step(&mut p, &mut opt, &[&[0.1, 0.2], &[f64::NAN]], 0.01, &cfg);
    assert!(matches!(err, Err(Error::NonFinite(_))));
    assert_eq!((&p, &opt), (&p0, &o0));
    let err = adam_step(&mut p, &mut opt, &[&[0.1, 0.2], &[0.3]], f64::INFINITY, &cfg);
    assert!(matches!(err, Err(Error::NonFinite(_))));
    assert_eq!((&p, &opt), (&p0, &o0));
}

#[test]
fn config_invariants_are_enforced() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for frac in [0.0, 1.0, -0.5] {
        let c = TrainConfig {
            stage_split_fraction: frac,
            ..ok.clone()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let c = TrainConfig { warmup_steps: 0, ..ok };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

fn log_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn stage_boundary_and_mode_components() {
    let s = setup();
    for mode in [Mode::Baseline, Mode::SCtr, Mode::STCtr] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = s.train.clone().with_mode(mode);
        let out = run(&s, &cfg, dir.path());
        assert_eq!(out.checkpoints.len(), 4);
        for e in 1..=4 {
            assert!(checkpoint_path(dir.path(), e).exists());
        }
        let rows = log_rows(&out.log);
        assert_eq!(rows.len(), out.records.len());
        let mut seen_two = false;
        for (r, row) in out.records.iter().zip(&rows) {
            let c = &r.components;
            assert!(c.ce > 0.0 && c.ce.is_finite());
            assert_eq!(row[1], r.stage.as_str());
            match r.stage {
                Stage::One => {
                    assert!(!seen_two, "stage 1 after stage 2");
                    assert_eq!(c.t_ctr, 0.0);
                }
                Stage::Two => seen_two = true,
                Stage::Finetune => panic!("finetune row in a training log"),
            }
            match mode {
                Mode::Baseline => assert_eq!((c.s_ctr, c.t_ctr), (0.0, 0.0)),
                Mode::SCtr => assert!(c.s_ctr > 0.0 && c.t_ctr == 0.0),
                Mode::STCtr => {
                    assert!(c.s_ctr > 0.0);
                    assert_eq!(c.t_ctr > 0.0, r.stage == Stage::Two);
                }
            }
            assert_eq!(c.l2, 0.0);
        }
        assert!(seen_two);
        assert!(out.state.is_finite());
    }
}

#[test]
fn l2_ablation_logs_l2_instead_of_contrast() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        use_l2_loss: true,
        max_epochs: 2,
        ..s.train.clone()
    };
    let out = run(&s, &cfg, dir.path());
    for r in &out.records {
        assert!(r.components.l2 > 0.0);
        assert_eq!(r.components.s_ctr, 0.0);
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().into(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn training_is_reproducible_and_resumable() {
    let s = setup();
    let cfg = s.train.clone().with_mode(Mode::STCtr);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&s, &cfg, a.path());
    run(&s, &cfg, b.path());
    assert!(tree(a.path()) == tree(b.path()));

    // interrupt after the stage-1 epochs, then resume
    for e in 3..=4 {
        fs::remove_file(checkpoint_path(b.path(), e)).unwrap();
    }
    let resumed = train(&s.corpus, &s.model, &cfg, b.path(), true, |_| {}).unwrap();
    assert_eq!(resumed.checkpoints.len(), 4);
    assert!(tree(a.path()) == tree(b.path()));
}

#[test]
fn audit_failure_refuses_to_train() {
    let mut s = setup();
    let i = s.corpus.select("fr", pivot_align::data::Split::Test)[0];
    s.corpus.samples[i].tgt = Some("the red".into());
    let dir = tempfile::tempdir().unwrap();
    let err = train(&s.corpus, &s.model, &s.train, dir.path(), false, |_| {});
    assert!(matches!(err, Err(Error::Data(_))));
    assert!(!checkpoint_path(dir.path(), 1).exists());
}

#[test]
fn finetune_uses_cross_entropy_only() {
    let s = setup();
    let start = ModelState::init(&s.model, 5).unwrap();
    let pairs = sample_pairs(&s.corpus, "fr", 10, 1).unwrap();
    let (tuned, log) = finetune(&start, &s.corpus, &pairs, &s.train, 0).unwrap();
    assert_eq!(
        log.len(),
        s.train.finetune_epochs * 10usize.div_ceil(s.train.finetune_batch)
    );
    for r in &log {
        assert_eq!(r.stage, Stage::Finetune);
        let c = &r.components;
        assert!(c.ce > 0.0);
        assert_eq!((c.s_ctr, c.t_ctr, c.l2), (0.0, 0.0, 0.0));
    }
    assert_ne!(tuned.params(), start.params());

    let zero = TrainConfig {
        finetune_epochs: 0,
        ..s.train.clone()
    };
    let (same, log) = finetune(&start, &s.corpus, &pairs, &zero, 0).unwrap();
    assert!(log.is_empty());
    assert_eq!(same.params(), start.params());
}

#[test]
fn finetune_rejects_bad_pair_sets() {
    let s = setup();
    let start = ModelState::init(&s.model, 5).unwrap();
    assert!(matches!(
        finetune(&start, &s.corpus, &[], &s.train, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(sample_pairs(&s.corpus, "fr", 0, 1), Err(Error::Config(_))));
    assert!(matches!(sample_pairs(&s.corpus, "fr", 21, 1), Err(Error::Config(_))));
    let a = sample_pairs(&s.corpus, "fr", 10, 1).unwrap();
    assert_eq!(a, sample_pairs(&s.corpus, "fr", 10, 1).unwrap());
    assert_ne!(a, sample_pairs(&s.corpus, "fr", 10, 2).unwrap());
}

fn save(dir: &Path, name: &str, table: &ParamTable) -> PathBuf {
    let p = dir.join(name);
    table.save(&p).unwrap();
    p
}

fn negated(state: &ModelState) -> ParamTable {
    let mut t = ParamTable::new();
    for (n, v) in state.to_table().entries() {
        let data = v.data().iter().map(|x| -x).collect();
        t.push(n.clone(), Tensor::new(v.shape().to_vec(), data).unwrap());
    }
    t
}

#[test]
fn checkpoint_averaging_properties() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let theta = ModelState::init(&s.model, 1).unwrap();
    let p = save(d, "a.pvck", &theta.to_table());

    let same = average_checkpoints(&[p.clone(), p.clone(), p.clone()], &s.model).unwrap();
    assert_eq!(same.params(), theta.params());

    let q = save(d, "neg.pvck", &negated(&theta));
    let zero = average_checkpoints(&[p.clone(), q], &s.model).unwrap();
    assert!(zero.params().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));

    let paths: Vec<PathBuf> = (2..5)
        .map(|k| {
            save(
                d,
                &format!("s{k}.pvck"),
                &ModelState::init(&s.model, k).unwrap().to_table(),
            )
        })
        .collect();
    let fwd = average_checkpoints(&paths, &s.model).unwrap();
    let rev: Vec<PathBuf> = [2, 0, 1].iter().map(|&i| paths[i].clone()).collect();
    let bwd = average_checkpoints(&rev, &s.model).unwrap();
    assert_eq!(fwd.params(), bwd.params());
}

#[test]
fn averaging_mismatched_shapes_fails() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let other = ModelConfig {
        d_ffn: s.model.d_ffn * 2,
        ..s.model.clone()
    };
    let a = save(dir.path(), "a.pvck", &ModelState::init(&s.model, 1).unwrap().to_table());
    let b = save(dir.path(), "b.pvck", &ModelState::init(&other, 1).unwrap().to_table());
    let err = average_checkpoints(&[a, b], &s.model);
    assert!(matches!(err, Err(Error::Checkpoint(_))));
    assert!(matches!(average_checkpoints(&[], &s.model), Err(Error::Checkpoint(_))));
}

proptest! {
    #[test]
    fn lr_is_bounded_by_peak(step in 1u64..100_000, warmup in 1u64..5000) {
        let lr = lr_at(step, 1e-3, warmup);
        prop_assert!(lr > 0.0 && lr <= 1e-3 * (1.0 + 1e-12));
    }

    #[test]
    fn adam_steps_stay_finite(g in prop::collection::vec(-1e6..1e6f64, 1..6), lr in 1e-6..1.0f64) {
        let mut p = vec![Tensor::zeros(vec![g.len()])];
        let mut opt = OptimizerState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &mut opt, &[&g], lr, &AdamConfig::default()).unwrap();
        }
        prop_assert!(p[0].is_finite());
        // each step moves a coordinate by at most lr / (1 − β₁) in magnitude
        for x in p[0].data() {
            prop_assert!(x.abs() <= 3.0 * lr * 10.0 + 1e-12);
        }
    }
}
