use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &[
    "--toy-preset",
    "--set",
    "dim=8",
    "--set",
    "epochs=4",
    "--set",
    "dm_steps=5",
    "--set",
    "dm_epochs=1",
];

fn dgar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dgar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path, tasks: usize) -> PathBuf {
    let ds = dir.join("ds");
    let t = tasks.to_string();
    ok(&[
        "toy",
        "--out",
        s(&ds),
        "--entities",
        "20",
        "--relations",
        "4",
        "--tasks",
        &t,
        "--facts-per-task",
        "60",
        "--seed",
        "2",
    ]);
    ds
}

fn train(ds: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--dataset", s(ds), "--out", s(out), "--seed", "4"];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    dgar(&args)
}

fn checkpoint_digests(run: &Path) -> Vec<String> {
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    m["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|t| {
            let mut v = vec![t["reasoner"]["sha256"].as_str().unwrap().to_string()];
            if let Some(d) = t["diffusion"]["sha256"].as_str() {
                v.push(d.to_string());
            }
            v
        })
        .collect()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_three_snapshots(path: &Path) {
    let mut text = String::new();
    for t in 0..3 {
        for i in 0..10 {
            text.push_str(&format!("{i}\t{}\t{}\t{}\n", i % 2, (i + t + 1) % 10, 100 + 10 * t));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn ingest_is_idempotent_and_splits_eight_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("facts.tsv");
    write_three_snapshots(&raw);
    let out = dir.path().join("ds");
    ok(&["ingest", "--data", s(&raw), "--granularity", "10", "--out", s(&out)]);
    let first = tree(&out);
    ok(&["ingest", "--data", s(&raw), "--granularity", "10", "--out", s(&out)]);
    assert_eq!(first, tree(&out));
    for t in 0..3 {
        let count = |f: &str| {
            fs::read_to_string(out.join(format!("task_{t:04}/{f}.txt")))
                .unwrap()
                .lines()
                .count()
        };
        assert_eq!((count("train"), count("valid"), count("test")), (8, 1, 1));
    }
}

#[test]
fn config_file_supplies_data_keys_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("facts.tsv");
    write_three_snapshots(&raw);
    let cfg = dir.path().join("run.conf");
    fs::write(
        &cfg,
        format!("# ingest\ndata.path = {}\ndata.granularity = 10\nseed = 1\n", raw.display()),
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["ingest", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["ingest", "--config", s(&cfg), "--seed", "1", "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    let c = dir.path().join("c");
    ok(&["ingest", "--config", s(&cfg), "--seed", "9", "--out", s(&c)]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn missing_input_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.txt");
    let out = dgar(&["ingest", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.txt"));
}

#[test]
fn malformed_input_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("bad.txt");
    fs::write(&raw, "1 2 3 4\n1 2 three 4\n").unwrap();
    let out = dgar(&["ingest", "--data", s(&raw), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.txt:2"));
}

#[test]
fn conflicting_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 2);
    let out = train(&ds, &dir.path().join("r"), &["--method", "er", "--no-gr"]);
    assert_eq!(out.status.code(), Some(2));
    let out = train(&ds, &dir.path().join("r"), &["--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fine_tuning_smoke_run_writes_every_task_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 3);
    let run = dir.path().join("run");
    let out = train(&ds, &run, &["--method", "ft"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for t in 0..3 {
        assert!(run.join(format!("task_{t:04}.reasoner.ckpt")).exists());
        assert!(!run.join(format!("task_{t:04}.diffusion.ckpt")).exists());
    }
    let ev = dir.path().join("eval");
    let out = ok(&["eval", "--checkpoints", s(&run), "--dataset", s(&ds), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("method\tfilter"));
    let cells = fs::read_to_string(ev.join("cells.jsonl")).unwrap();
    assert_eq!(cells.lines().count(), 2 * 6);
    for f in ["summary.tsv", "metrics.json", "mrr_raw.svg", "forgetting_time-aware.svg"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let rep = dir.path().join("rep");
    ok(&["report", "--eval", s(&ev), "--eval", s(&ev), "--out", s(&rep)]);
    assert!(rep.join("comparison.tsv").exists());
}

#[test]
fn eval_with_missing_checkpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 3);
    let run = dir.path().join("run");
    assert!(train(&ds, &run, &["--method", "ft"]).status.success());
    fs::remove_file(run.join("task_0001.reasoner.ckpt")).unwrap();
    let out = dgar(&["eval", "--checkpoints", s(&run), "--dataset", s(&ds), "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task 1"));
}

#[test]
fn training_is_reproducible_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train(&ds, &a, &[]).status.success());
    assert!(train(&ds, &b, &[]).status.success());
    let da = checkpoint_digests(&a);
    assert_eq!(da.len(), 6);
    assert_eq!(da, checkpoint_digests(&b));
}

#[test]
fn disabling_the_guider_matches_zero_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train(&ds, &a, &["--no-guider"]).status.success());
    assert!(train(&ds, &b, &["--set", "gamma=0"]).status.success());
    assert_eq!(checkpoint_digests(&a), checkpoint_digests(&b));
    let c = dir.path().join("c");
    assert!(train(&ds, &c, &[]).status.success());
    assert_ne!(checkpoint_digests(&a), checkpoint_digests(&c));
}

#[test]
fn pretraining_needs_the_first_reasoner() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy(dir.path(), 2);
    let out = dgar(&[
        "pretrain-dm",
        "--dataset",
        s(&ds),
        "--checkpoints",
        s(&dir.path().join("none")),
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let run = dir.path().join("run");
    assert!(train(&ds, &run, &["--method", "ft"]).status.success());
    let pre = dir.path().join("p");
    let mut args = vec![
        "pretrain-dm",
        "--dataset",
        s(&ds),
        "--checkpoints",
        s(&run),
        "--out",
        s(&pre),
    ];
    args.extend_from_slice(FAST);
    ok(&args);
    assert!(dir.path().join("p/task_0000.diffusion.ckpt").exists());
}
