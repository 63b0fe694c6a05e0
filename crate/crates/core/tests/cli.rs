use std::ffi::OsStr;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pivot_align::pipeline::corpus_hash;
use pivot_align::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_pivot-align");

fn small_config() -> String {
    let mut rc = RunConfig::small();
    rc.corpus.n_train_high = 60;
    rc.corpus.n_train_low = 60;
    rc.corpus.n_test = 12;
    rc.corpus.n_fewshot = 10;
    rc.train.max_epochs = 2;
    rc.train.finetune_epochs = 1;
    rc.eval.test_limit = 12;
    rc.eval.retrieval_n = 12;
    rc.eval.repr_per_lang = 6;
    rc.eval.attn_samples = 4;
    rc.to_text()
}

fn run<S: AsRef<OsStr>>(wd: &Path, args: &[S]) -> Output {
    Command::new(BIN)
        .arg("--workdir")
        .arg(wd)
        .args(args)
        .env_remove("PIVOT_ALIGN_SEED")
        .output()
        .unwrap()
}

fn ok<S: AsRef<OsStr>>(wd: &Path, args: &[S]) -> String {
    let out = run(wd, args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join("small.cfg"), small_config()).unwrap();
    ok(wd.path(), &["--config", "small.cfg", "gen", "--out", "data"]);
    wd
}

fn log_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn gen_writes_corpus_and_is_deterministic() {
    let wd = workdir();
    let d = wd.path().join("data");
    for p in ["corpus", "images"] {
        assert!(d.join(p).is_dir(), "{p} missing");
    }
    assert!(d.join("vocab.txt").is_file());
    let h1 = corpus_hash(&d).unwrap();
    let stdout = ok(wd.path(), &["--config", "small.cfg", "gen", "--out", "data"]);
    assert!(stdout.contains("train") && stdout.contains(&h1));
    assert_eq!(corpus_hash(&d).unwrap(), h1);

    let out = Command::new(BIN)
        .args(["--workdir"])
        .arg(wd.path())
        .args(["--config", "small.cfg", "gen", "--out", "other"])
        .env("PIVOT_ALIGN_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(corpus_hash(&wd.path().join("other")).unwrap(), h1);
}

#[test]
fn configuration_errors_exit_2_without_output() {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join("bad.cfg"), "train.max_epochs = lots\n").unwrap();
    let out = run(wd.path(), &["--config", "bad.cfg", "gen", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!wd.path().join("data").exists());

    fs::write(wd.path().join("unknown.cfg"), "model.wings = 2\n").unwrap();
    let out = run(wd.path(), &["--config", "unknown.cfg", "gen"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(wd.path(), &["--set", "train.warmup_steps=0", "gen"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(wd.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(wd.path().join("blocker"), "").unwrap();
    let out = run(wd.path(), &["--config", "unknown.cfg", "gen", "--out", "blocker/data"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(wd.path().join("small.cfg"), small_config()).unwrap();
    let out = run(wd.path(), &["--config", "small.cfg", "gen", "--out", "blocker/data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_modes_map_to_loss_components() {
    let wd = workdir();
    let p = wd.path();
    let out = run(
        p,
        &["--config", "small.cfg", "train", "--out", "runs/x", "--mode", "nope"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        p,
        &["--config", "small.cfg", "train", "--out", "runs/x", "--ablate", "l3"],
    );
    assert_eq!(out.status.code(), Some(2));

    ok(
        p,
        &[
            "--config",
            "small.cfg",
            "train",
            "--out",
            "runs/base",
            "--mode",
            "baseline",
        ],
    );
    let log = p.join("runs/base/train_log.csv");
    assert!(log_column(&log, "s_ctr").iter().all(|&v| v == 0.0));
    assert!(log_column(&log, "t_ctr").iter().all(|&v| v == 0.0));
    assert!(p.join("runs/base/ckpt-2.pvck").is_file());

    ok(
        p,
        &["--config", "small.cfg", "train", "--out", "runs/s", "--mode", "s-ctr"],
    );
    let log = p.join("runs/s/train_log.csv");
    assert!(log_column(&log, "s_ctr").iter().all(|&v| v > 0.0));
    assert!(log_column(&log, "t_ctr").iter().all(|&v| v == 0.0));

    ok(
        p,
        &["--config", "small.cfg", "train", "--out", "runs/l2", "--ablate", "l2"],
    );
    let log = p.join("runs/l2/train_log.csv");
    assert!(log_column(&log, "l2").iter().all(|&v| v > 0.0));
    assert!(log_column(&log, "s_ctr").iter().all(|&v| v == 0.0));
}

#[test]
fn finetune_and_eval_contracts() {
    let wd = workdir();
    let p = wd.path();
    ok(p, &["--config", "small.cfg", "train", "--out", "run"]);
    let c = |extra: &[&str]| -> Vec<String> {
        ["--config", "small.cfg"]
            .iter()
            .chain(extra)
            .map(|s| s.to_string())
            .collect()
    };

    let ft = c(&["finetune", "--checkpoint", "run/ckpt-2.pvck", "--lang", "fr", "--out"]);
    let mut zero = ft.clone();
    zero.extend(["ft0".into(), "--pairs".into(), "0".into()]);
    assert_eq!(run(p, &zero).status.code(), Some(2));
    let mut many = ft.clone();
    many.extend(["ft0".into(), "--pairs".into(), "11".into()]);
    assert_eq!(run(p, &many).status.code(), Some(2));

    for out in ["ftA", "ftB"] {
        let mut v = ft.clone();
        v.extend([out.into(), "--pairs".into(), "5".into(), "--seeds".into(), "2".into()]);
        ok(p, &v);
    }
    let report = fs::read_to_string(p.join("ftA/fr/report.csv")).unwrap();
    assert!(report.contains("task,pairs,mean,std"));
    assert_eq!(report, fs::read_to_string(p.join("ftB/fr/report.csv")).unwrap());
    for k in 0..2 {
        assert!(p.join(format!("ftA/fr/seed-{k}.pvck")).is_file());
    }

    let single = c(&["eval", "--checkpoint", "run/ckpt-2.pvck", "--out", "e1"]);
    ok(p, &single);
    let avg = c(&[
        "eval",
        "--checkpoint",
        "run/ckpt-1.pvck",
        "run/ckpt-2.pvck",
        "--avg-last",
        "1",
        "--out",
        "e2",
    ]);
    ok(p, &avg);
    let r1 = fs::read_to_string(p.join("e1/report.csv")).unwrap();
    assert!(r1.starts_with("task,bleu,n,seed\n"));
    assert_eq!(r1, fs::read_to_string(p.join("e2/report.csv")).unwrap());

    let retrieve = c(&[
        "eval",
        "--checkpoint",
        "run/ckpt-2.pvck",
        "--task",
        "retrieve",
        "--out",
        "e3",
    ]);
    let stdout = ok(p, &retrieve);
    for k in [1, 5, 10] {
        assert!(stdout.contains(&format!("R@{k} ")), "{stdout}");
    }

    let all = c(&[
        "eval",
        "--checkpoint",
        "run/ckpt-2.pvck",
        "--task",
        "attn,reprs",
        "--out",
        "e4",
    ]);
    ok(p, &all);
    assert!(p.join("e4/attn/grounding.csv").is_file());
    assert!(p.join("e4/reprs.csv").is_file() && p.join("e4/overlap.csv").is_file());

    let mut wider = c(&["--set", "model.d_ffn=96"]);
    wider.extend(["eval", "--checkpoint", "run/ckpt-2.pvck", "--out", "e5"].map(String::from));
    assert_eq!(run(p, &wider).status.code(), Some(3));
    let bad_task = c(&[
        "eval",
        "--checkpoint",
        "run/ckpt-2.pvck",
        "--task",
        "dance",
        "--out",
        "e6",
    ]);
    assert_eq!(run(p, &bad_task).status.code(), Some(2));
}
