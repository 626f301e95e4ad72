mod common;

use std::fs;

use dgar_core::checkpoint::file_sha256;
use dgar_core::data::{
    add_inverse, build_task_stream, load_quadruples, read_dataset, write_dataset, Quadruple, SplitRatios,
};
use dgar_core::Error;

fn three_snapshot_file(dir: &std::path::Path) -> std::path::PathBuf {
    let mut text = String::new();
    for (t, raw) in [(0, 24), (1, 48), (2, 72)] {
        for i in 0..10 {
            text.push_str(&format!("{} {} {} {}\n", i, i % 3, (i + t + 1) % 12, raw));
        }
    }
    let path = dir.join("facts.txt");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn three_timestamps_split_eight_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let (facts, vocab) = load_quadruples(&three_snapshot_file(dir.path()), 24).unwrap();
    assert_eq!(vocab.num_entities, 12);
    assert_eq!(vocab.num_relations, 3);
    let stream = build_task_stream(&facts, vocab, SplitRatios::default(), 0).unwrap();
    assert_eq!(stream.len(), 3);
    for (t, task) in stream.tasks.iter().enumerate() {
        assert_eq!((task.train.len(), task.valid.len(), task.test.len()), (8, 1, 1));
        assert!(task.train.iter().chain(&task.valid).chain(&task.test).all(|q| q.timestamp == t));
    }
}

#[test]
fn dataset_round_trips_and_rewrites_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (facts, vocab) = load_quadruples(&three_snapshot_file(dir.path()), 24).unwrap();
    let stream = build_task_stream(&facts, vocab, SplitRatios::default(), 3).unwrap();
    let out = dir.path().join("ds");
    write_dataset(&out, &stream).unwrap();
    let first = file_sha256(&out.join("task_0001/train.txt")).unwrap();
    write_dataset(&out, &build_task_stream(&facts, vocab, SplitRatios::default(), 3).unwrap()).unwrap();
    assert_eq!(first, file_sha256(&out.join("task_0001/train.txt")).unwrap());
    let back = read_dataset(&out).unwrap();
    assert_eq!(back, stream);
    assert_eq!(back.digest(), stream.digest());
    assert!(write_dataset(&out, &stream.augmented().unwrap()).is_err());
}

#[test]
fn split_depends_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (facts, vocab) = load_quadruples(&three_snapshot_file(dir.path()), 24).unwrap();
    let a = build_task_stream(&facts, vocab, SplitRatios::default(), 1).unwrap();
    let b = build_task_stream(&facts, vocab, SplitRatios::default(), 2).unwrap();
    assert_ne!(a.digest(), b.digest());
}

#[test]
fn parse_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "0 1 2 0\n0 1 x 0\n").unwrap();
    match load_quadruples(&path, 1) {
        Err(Error::Parse { path: p, line, .. }) => {
            assert_eq!(p, path);
            assert_eq!(line, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&path, "").unwrap();
    assert!(matches!(load_quadruples(&path, 1), Err(Error::EmptyDataset(_))));
    assert!(matches!(load_quadruples(&dir.path().join("nope"), 1), Err(Error::Io { .. })));
}

#[test]
fn inverse_augmentation_doubles_distinct_facts() {
    let facts = [Quadruple::new(0, 1, 2, 0), Quadruple::new(2, 0, 0, 0)];
    let aug = add_inverse(&facts, 2).unwrap();
    assert_eq!(aug.len(), 4);
    assert!(aug.contains(&Quadruple::new(2, 3, 0, 0)));
    assert!(aug.contains(&Quadruple::new(0, 2, 2, 0)));
}
