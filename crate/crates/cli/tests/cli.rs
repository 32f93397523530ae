//! Drives the `cap` binary end to end on a tiny synthetic corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cap"))
        .args(args)
        .env("CAP_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3
paths.train_manifest = "corpus/manifest.tsv"
paths.out_dir = "run"
trunk.stage_channels = [2, 2, 2, 2]
trunk.stage_blocks = [1, 1, 1, 1]
trunk.frame_dim = 2
trunk.embed_dim = 8
pooling.hidden = 8
episode.n = 3
episode.m = 2
optim.max_epochs = 2
"#;

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = cap(&["synth", "--speakers", "3", "--utts", "2", "--seconds", "1.0", "--seed", "4", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "manifest.tsv"), read(&b, "manifest.tsv"));
    assert_eq!(read(&a, "trials.txt"), read(&b, "trials.txt"));
    let manifest = String::from_utf8(read(&a, "manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with(".lab")).count(), 6);
    // One target pair per speaker plus as many nontarget pairs.
    let trials = String::from_utf8(read(&a, "trials.txt")).unwrap();
    assert_eq!(trials.lines().count(), 6);
}

#[test]
fn train_rejects_bad_input_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cap(&["train", "--manifest", s(&dir.path().join("missing.tsv"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "optim.lr00 = 0.1\n").unwrap();
    let o = cap(&["train", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr00"));

    assert_eq!(code(&cap(&["train", "--bogus"])), 1);
    assert_eq!(code(&cap(&["--help"])), 0);
}

#[test]
fn train_eval_and_attention_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let o = cap(&["synth", "--speakers", "3", "--utts", "2", "--seconds", "2.5", "--out", s(&corpus)]);
    assert_eq!(code(&o), 0);
    fs::write(root.join("exp.toml"), TINY).unwrap();

    let o = cap(&["train", s(&root.join("exp.toml"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = root.join("run");
    assert!(run.join("config.toml").is_file());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);
    let ckpt = run.join("last.ckpt");

    let trials = corpus.join("trials.txt");
    let scores = root.join("scores.txt");
    let o = cap(&[
        "eval", "--checkpoint", s(&ckpt), "--trials", s(&trials), "--scores", s(&scores),
        "--segments", "2", "--segment-seconds", "2.0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("EER=") && stdout.contains("MinDCF="), "{stdout}");
    let n_trials = fs::read_to_string(&trials).unwrap().lines().count();
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), n_trials);

    let o = cap(&["eval", "--checkpoint", s(&ckpt), "--trials", s(&trials), "--pooling", "tap"]);
    assert_eq!(code(&o), 1);
    let empty = root.join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&cap(&["eval", "--checkpoint", s(&ckpt), "--trials", s(&empty)])), 1);

    let first = fs::read_to_string(&trials).unwrap();
    let mut words = first.lines().next().unwrap().split_whitespace().skip(1);
    let (enroll, test) = (corpus.join(words.next().unwrap()), corpus.join(words.next().unwrap()));
    let json = root.join("att.json");
    let o = cap(&[
        "attention", "--checkpoint", s(&ckpt), "--enroll", s(&enroll), "--test", s(&test),
        "--out", s(&json), "--pair-id", "p0", "--same", "true",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["pair_id"], "p0");
    for side in ["enroll", "test"] {
        let w = v[side]["frame_weights"].as_array().unwrap();
        let map = v[side]["frame_map"].as_array().unwrap();
        assert_eq!(map.len(), v[side]["mel"][0].as_array().unwrap().len());
        let last = map.last().unwrap().as_u64().unwrap() as usize;
        assert_eq!(last, w.len() - 1);
    }
}

#[test]
fn gradcheck_exit_codes() {
    let o = cap(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = cap(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
