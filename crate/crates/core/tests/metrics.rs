use std::collections::BTreeSet;

use dgar_core::eval::{forgetting_score, hits_at_k, mrr, rank_query, CellMetrics, Filter, MetricsMatrix};
use proptest::prelude::*;

/// Sorted-order rank: midpoint of the block of candidates tied with the
/// target, after dropping filtered entities.
fn rank_oracle(scores: &[f64], target: usize, known: &BTreeSet<usize>) -> f64 {
    let mut kept: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(e, _)| *e == target || !known.contains(e))
        .map(|(_, &s)| s)
        .collect();
    kept.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let t = scores[target];
    let first = kept.iter().position(|&s| s == t).unwrap();
    let last = kept.iter().rposition(|&s| s == t).unwrap();
    (first + last) as f64 / 2.0 + 1.0
}

fn mrr_oracle(ranks: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in ranks {
        total += 1.0 / r;
    }
    total / ranks.len() as f64
}

fn hits_oracle(ranks: &[f64], k: usize) -> f64 {
    let mut hit = 0;
    for &r in ranks {
        if r <= k as f64 {
            hit += 1;
        }
    }
    hit as f64 / ranks.len() as f64
}

/// Mean over tasks 2..=n (1-based) of `p[n][i] - p[i][i]`.
fn forgetting_oracle(p: &[Vec<f64>]) -> f64 {
    let n = p.len();
    let mut total = 0.0;
    let mut count = 0;
    for i in 2..=n {
        total += p[n - 1][i - 1] - p[i - 1][i - 1];
        count += 1;
    }
    total / count as f64
}

#[test]
fn mrr_of_one_two_four() {
    let v = mrr(&[1.0, 2.0, 4.0]).unwrap();
    assert_eq!(v, (1.0 + 0.5 + 0.25) / 3.0);
    assert!((v - 0.583_333_333_333_333_3).abs() < 1e-15);
}

#[test]
fn ties_take_the_expected_rank() {
    assert_eq!(rank_query(&[0.5, 0.5, 0.5, 0.5], 0, None).unwrap(), 2.5);
    assert_eq!(rank_query(&[0.9, 0.5, 0.5, 0.1], 2, None).unwrap(), 2.5);
}

#[test]
fn filter_removes_other_true_objects_only() {
    let scores = [0.9, 0.8, 0.7, 0.6];
    let known: BTreeSet<usize> = [0, 1, 3].into_iter().collect();
    assert_eq!(rank_query(&scores, 3, None).unwrap(), 4.0);
    assert_eq!(rank_query(&scores, 3, Some(&known)).unwrap(), 2.0);
    assert_eq!(rank_query(&scores, 1, Some(&known)).unwrap(), 1.0);
}

#[test]
fn empty_and_invalid_inputs_fail() {
    assert!(mrr(&[]).is_err());
    assert!(hits_at_k(&[], 1).is_err());
    assert!(hits_at_k(&[1.0], 0).is_err());
    assert!(rank_query(&[0.1], 1, None).is_err());
    assert!(rank_query(&[f64::NAN, 0.1], 0, None).is_err());
    assert!(forgetting_score(&[vec![0.5]]).is_err());
}

#[test]
fn summary_reads_the_last_row() {
    let cell = |m: f64| CellMetrics {
        mrr: m,
        hits1: m / 2.0,
        hits3: m,
        hits10: 1.0,
        queries: 10,
    };
    let matrix = MetricsMatrix {
        filter: Filter::Raw,
        cells: vec![vec![cell(0.6)], vec![cell(0.4), cell(0.5)], vec![cell(0.3), cell(0.2), cell(0.7)]],
    };
    let s = matrix.summary().unwrap();
    assert_eq!(s.current.mrr, 0.7);
    assert!((s.average.mrr - 0.4).abs() < 1e-15);
    assert_eq!(s.average.queries, 30);
    let f = s.forgetting.unwrap();
    assert!((f - ((0.2 - 0.5) + (0.7 - 0.7)) / 2.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn rank_matches_sorted_oracle(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), 2..30),
        target_seed in any::<usize>(),
        known_mask in any::<u64>(),
    ) {
        let target = target_seed % scores.len();
        let known: BTreeSet<usize> = (0..scores.len()).filter(|i| known_mask >> (i % 64) & 1 == 1).collect();
        prop_assert_eq!(rank_query(&scores, target, Some(&known)).unwrap(), rank_oracle(&scores, target, &known));
        prop_assert_eq!(rank_query(&scores, target, None).unwrap(), rank_oracle(&scores, target, &BTreeSet::new()));
    }

    #[test]
    fn mrr_and_hits_match_loops(ranks in prop::collection::vec(1usize..200, 1..100), halves in prop::collection::vec(any::<bool>(), 100)) {
        let ranks: Vec<f64> = ranks.iter().zip(&halves).map(|(&r, &h)| r as f64 + if h { 0.5 } else { 0.0 }).collect();
        prop_assert!((mrr(&ranks).unwrap() - mrr_oracle(&ranks)).abs() < 1e-9);
        for k in [1, 3, 10] {
            prop_assert!((hits_at_k(&ranks, k).unwrap() - hits_oracle(&ranks, k)).abs() < 1e-9);
        }
        let m = mrr(&ranks).unwrap();
        prop_assert!(m > 0.0 && m <= 1.0);
    }

    #[test]
    fn forgetting_matches_loop(n in 2usize..12, values in prop::collection::vec(0.0f64..1.0, 144)) {
        let p: Vec<Vec<f64>> = (0..n).map(|i| values[i * 12..i * 12 + i + 1].to_vec()).collect();
        prop_assert!((forgetting_score(&p).unwrap() - forgetting_oracle(&p)).abs() < 1e-9);
    }
}
