mod common;

use common::*;
use dgar_core::config::{Ablations, TrainConfig};
use dgar_core::data::Quadruple;
use dgar_core::reasoner::{evolve, score};
use dgar_core::tensor::Matrix;
use dgar_core::trainer::{
    evaluate_loss, loss_and_gradients, loss_current, loss_total, Combine, LossInputs, QueryBatch, ReplayTerm,
    StreamContext,
};
use dgar_core::Error;
use proptest::prelude::*;

#[test]
fn uniform_logits_give_log_vocabulary() {
    let logits = Matrix::filled(3, 8, 0.7);
    let labels = vec![vec![0], vec![5], vec![7]];
    assert!((loss_current(&logits, &labels).unwrap() - 8f64.ln()).abs() < 1e-6);
}

#[test]
fn empty_label_row_is_a_contract_error() {
    let logits = Matrix::zeros(2, 4);
    assert!(matches!(loss_current(&logits, &[vec![1], vec![]]), Err(Error::Contract(_))));
    assert!(matches!(loss_current(&logits, &[vec![1]]), Err(Error::Contract(_))));
    assert!(loss_total(1.0, 1.0, -0.5).is_err());
}

/// `mean_rows Σ_labels -log softmax`, written out with explicit sums.
fn loss_oracle(logits: &Matrix, labels: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let mut z = 0.0;
        for j in 0..logits.cols() {
            z += logits[(i, j)].exp();
        }
        for &e in l {
            total -= (logits[(i, e)].exp() / z).ln();
        }
    }
    total / labels.len() as f64
}

proptest! {
    #[test]
    fn multi_label_loss_matches_summation(seed in 0u64..500, rows in 1usize..6, cols in 2usize..10) {
        let logits = gaussian(rows, cols, seed);
        let labels: Vec<Vec<usize>> = (0..rows).map(|i| (0..cols).filter(|j| (i + j + seed as usize) % 3 == 0).collect::<Vec<_>>()).map(|mut l| { if l.is_empty() { l.push(0) } l }).collect();
        prop_assert!((loss_current(&logits, &labels).unwrap() - loss_oracle(&logits, &labels)).abs() < 1e-9);
    }

    #[test]
    fn total_is_affine_in_mu(c in 0.0f64..10.0, r in 0.0f64..10.0, mu in 0.0f64..5.0) {
        let t0 = loss_total(c, r, 0.0).unwrap();
        let t1 = loss_total(c, r, 1.0).unwrap();
        prop_assert!((loss_total(c, r, mu).unwrap() - (t0 + mu * (t1 - t0))).abs() < 1e-9);
    }
}

#[test]
fn query_batch_groups_objects() {
    let facts = [
        Quadruple::new(0, 1, 2, 0),
        Quadruple::new(0, 1, 3, 0),
        Quadruple::new(0, 1, 2, 0),
        Quadruple::new(1, 0, 2, 0),
    ];
    let b = QueryBatch::from_facts(&facts);
    assert_eq!(b.queries, vec![(0, 1), (1, 0)]);
    assert_eq!(b.labels, vec![vec![2, 3], vec![2]]);
}

struct Fixture {
    ctx: StreamContext,
    params: dgar_core::reasoner::ReasonerParams,
}

fn fixture() -> Fixture {
    let stream = small_stream(4, 5);
    let v = stream.vocab;
    Fixture {
        ctx: StreamContext::new(&stream).unwrap(),
        params: reasoner(v.num_entities, v.num_relations, 6, 2, 9),
    }
}

fn inputs<'g>(f: &'g Fixture, combine: Combine) -> LossInputs<'g, 'static> {
    let replay = (1..3)
        .map(|t| ReplayTerm {
            history: f.ctx.graphs.history(t, 2),
            batch: QueryBatch::from_facts(&f.ctx.stream.tasks[t].train[..10]),
        })
        .collect();
    LossInputs {
        history: f.ctx.graphs.history(3, 2),
        current: QueryBatch::from_facts(&f.ctx.stream.tasks[3].train),
        replay,
        hook: None,
        combine,
    }
}

#[test]
fn current_term_matches_scored_oracle() {
    let f = fixture();
    let inp = inputs(&f, Combine::Regularizer { mu: 0.0 });
    let h = evolve(&f.params, &inp.history, None).unwrap().final_state;
    let logits = score(&f.params, &h, &inp.current.queries).unwrap();
    let want = loss_oracle(&logits, &inp.current.labels);
    assert!((evaluate_loss(&f.params, &inp).unwrap().current - want).abs() < 1e-9);
}

#[test]
fn task_loss_is_affine_in_mu() {
    let f = fixture();
    let at = |mu| evaluate_loss(&f.params, &inputs(&f, Combine::Regularizer { mu })).unwrap();
    let (l0, l1) = (at(0.0), at(1.0));
    assert!(l1.replay > 0.0);
    for mu in [0.25, 0.5, 2.0, 7.5] {
        let l = at(mu);
        assert!((l.total - (l0.total + mu * (l1.total - l0.total))).abs() < 1e-9);
        assert!((l.total - (l.current + mu * l.replay)).abs() < 1e-12);
    }
}

#[test]
fn union_is_query_weighted_mean() {
    let f = fixture();
    let inp = inputs(&f, Combine::Union);
    let l = evaluate_loss(&f.params, &inp).unwrap();
    let n_c = inp.current.len() as f64;
    let n_r: f64 = inp.replay.iter().map(|r| r.batch.len() as f64).sum();
    assert!((l.total - (n_c * l.current + n_r * l.replay) / (n_c + n_r)).abs() < 1e-12);
}

#[test]
fn disabled_replay_gradient_equals_current_gradient() {
    let f = fixture();
    let mut cfg = TrainConfig::toy();
    cfg.ablations = Ablations {
        no_lr: true,
        ..Ablations::default()
    };
    let with = inputs(&f, Combine::Regularizer { mu: cfg.effective_mu() });
    let mut only = inputs(&f, Combine::Regularizer { mu: 1.0 });
    only.replay.clear();
    let (va, ga) = loss_and_gradients(&f.params, &with).unwrap();
    let (vb, gb) = loss_and_gradients(&f.params, &only).unwrap();
    assert_eq!(va.total, vb.total);
    assert_eq!(ga, gb);

    // spot check one decoder weight against central differences
    let h = 1e-5;
    let mut plus = f.params.clone();
    let mut minus = f.params.clone();
    plus.decoder_weight[(2, 3)] += h;
    minus.decoder_weight[(2, 3)] -= h;
    let fd = (evaluate_loss(&plus, &only).unwrap().total - evaluate_loss(&minus, &only).unwrap().total) / (2.0 * h);
    let names: Vec<String> = f.params.tensors().into_iter().map(|(n, _)| n).collect();
    let idx = names.iter().position(|n| n == "decoder.weight").unwrap();
    let analytic = ga[idx][(2, 3)];
    assert!((analytic - fd).abs() <= 1e-6 + 1e-4 * fd.abs(), "{analytic} vs {fd}");
}
