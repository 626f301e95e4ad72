mod common;

use common::*;
use dgar_core::config::{Ablations, Method};
use dgar_core::eval::{mrr, rank_facts};
use dgar_core::par::Parallelism;
use dgar_core::reasoner::{evolve, ReasonerParams};
use dgar_core::rng;
use dgar_core::trainer::{
    build_replay_set, train_stream, NoopObserver, Reservoir, StreamContext, TaskOutcome, TrainObserver,
};
use dgar_core::Error;

#[derive(Default)]
struct Continuity {
    starts: Vec<(usize, bool)>,
    ends: Vec<usize>,
    last_end: Option<ReasonerParams>,
}

impl TrainObserver for Continuity {
    fn task_start(&mut self, task: usize, previous: Option<&ReasonerParams>, initial: &ReasonerParams) {
        let equal = match previous {
            Some(p) => {
                assert_eq!(Some(p), self.last_end.as_ref(), "previous must be the last finished task");
                p.tensors() == initial.tensors()
            }
            None => task == 0,
        };
        self.starts.push((task, equal));
    }

    fn task_end(&mut self, outcome: &TaskOutcome) -> dgar_core::Result<()> {
        self.ends.push(outcome.task);
        self.last_end = Some(outcome.params.clone());
        Ok(())
    }
}

#[test]
fn each_task_starts_from_the_previous_parameters() {
    let stream = small_stream(4, 1);
    let mut obs = Continuity::default();
    train_stream(&stream, &fast_config(Method::Dgar, 3), &mut obs).unwrap();
    assert_eq!(obs.starts, (0..4).map(|t| (t, true)).collect::<Vec<_>>());
    assert_eq!(obs.ends, vec![0, 1, 2, 3]);
}

#[test]
fn replay_counters_follow_the_method() {
    let stream = small_stream(4, 2);
    let full = train_stream(&stream, &fast_config(Method::Dgar, 1), &mut NoopObserver).unwrap();
    assert_eq!(full.stats.generation_calls, 3);
    assert_eq!(full.stats.dm_updates, 4);
    assert!(full.stats.generated_vectors > 0);
    assert!(full.stats.hook_calls > 0);
    assert!(full.outcomes[0].replay_facts == 0 && full.outcomes[1].replay_facts > 0);

    let mut cfg = fast_config(Method::Dgar, 1);
    cfg.ablations.no_gr = true;
    let no_gr = train_stream(&stream, &cfg, &mut NoopObserver).unwrap();
    assert_eq!(no_gr.stats, Default::default());
    assert!(no_gr.outcomes.iter().all(|o| o.diffusion.is_none()));

    for method in [Method::Ft, Method::Er] {
        let run = train_stream(&stream, &fast_config(method, 1), &mut NoopObserver).unwrap();
        assert_eq!(run.stats, Default::default());
    }
}

fn final_params(method: Method, tweak: impl FnOnce(&mut dgar_core::config::TrainConfig)) -> Vec<ReasonerParams> {
    let stream = small_stream(4, 3);
    let mut cfg = fast_config(method, 5);
    tweak(&mut cfg);
    train_stream(&stream, &cfg, &mut NoopObserver)
        .unwrap()
        .outcomes
        .into_iter()
        .map(|o| o.params)
        .collect()
}

#[test]
fn dgar_without_generation_or_replay_loss_reduces_to_fine_tuning() {
    let ft = final_params(Method::Ft, |_| {});
    let reduced = final_params(Method::Dgar, |c| {
        c.ablations = Ablations {
            no_gr: true,
            no_lr: true,
            ..Ablations::default()
        }
    });
    assert_eq!(ft, reduced);
}

#[test]
fn empty_buffer_replay_equals_fine_tuning() {
    let ft = final_params(Method::Ft, |_| {});
    let er = final_params(Method::Er, |c| c.er_capacity = 0);
    assert_eq!(ft, er);
    let er_full = final_params(Method::Er, |_| {});
    assert_ne!(ft, er_full);
}

#[test]
fn buffer_replay_uses_the_prompt_budget() {
    let stream = small_stream(4, 4);
    let cfg = fast_config(Method::Er, 2);
    let run = train_stream(&stream, &cfg, &mut NoopObserver).unwrap();
    let ctx = StreamContext::new(&stream).unwrap();
    let mut dgar = cfg.clone();
    dgar.method = Method::Dgar;
    for t in 1..4 {
        let budget = build_replay_set(&dgar, &ctx, t).unwrap().num_facts();
        assert!(run.outcomes[t].replay_facts > 0);
        assert!(run.outcomes[t].replay_facts <= budget);
    }
}

#[test]
fn reservoir_keeps_each_item_with_equal_probability() {
    let trials = 10_000;
    let mut counts = [0usize; 100];
    for trial in 0..trials {
        let mut r = Reservoir::new(10, rng::stream(77, &[trial as u64]));
        r.extend(0..100usize);
        assert_eq!(r.len(), 10);
        for &i in r.items() {
            counts[i] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let p = c as f64 / trials as f64;
        assert!((p - 0.1).abs() <= 0.02, "item {i}: {p}");
    }
}

#[test]
fn runs_are_deterministic_across_modes() {
    let stream = small_stream(3, 6);
    let mut cfg = fast_config(Method::Dgar, 8);
    let a = train_stream(&stream, &cfg, &mut NoopObserver).unwrap();
    cfg.parallelism = Parallelism::Sequential;
    let b = train_stream(&stream, &cfg, &mut NoopObserver).unwrap();
    for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
        assert_eq!(x.params, y.params);
        assert_eq!(x.diffusion, y.diffusion);
    }
    assert_eq!(a.stats, b.stats);
}

#[test]
fn training_keeps_the_best_validation_epoch() {
    let stream = small_stream(3, 7);
    let mut cfg = fast_config(Method::Ft, 9);
    cfg.epochs = 12;
    let run = train_stream(&stream, &cfg, &mut NoopObserver).unwrap();
    let ctx = StreamContext::new(&stream).unwrap();
    for o in &run.outcomes {
        let best = o.best_epoch.expect("toy tasks have validation facts");
        let logged = o.epochs[best].valid_mrr.unwrap();
        assert!(o.epochs.iter().all(|e| e.valid_mrr.unwrap() <= logged));
        let h = evolve(&o.params, &ctx.graphs.history(o.task, cfg.window), None).unwrap().final_state;
        let got = mrr(&rank_facts(&o.params, &h, &ctx.stream.tasks[o.task].valid, None).unwrap()).unwrap();
        assert_eq!(got, logged);
        assert!(o.epochs.len() <= cfg.epochs);
    }
}

#[test]
fn baselines_reject_ablation_flags() {
    let stream = small_stream(2, 1);
    let mut cfg = fast_config(Method::Ft, 0);
    cfg.ablations.no_hp = true;
    assert!(matches!(train_stream(&stream, &cfg, &mut NoopObserver), Err(Error::Config(_))));
}

#[test]
fn first_task_has_no_replay_set() {
    let stream = small_stream(3, 2);
    let ctx = StreamContext::new(&stream).unwrap();
    let cfg = fast_config(Method::Dgar, 0);
    assert!(build_replay_set(&cfg, &ctx, 0).unwrap().is_empty());
    let set = build_replay_set(&cfg, &ctx, 2).unwrap();
    assert!(!set.is_empty());
    assert!(set.prompts.iter().all(|p| p.time < 2));
}

#[test]
fn uniform_history_ablation_keeps_the_fact_budget() {
    let stream = small_stream(4, 3);
    let ctx = StreamContext::new(&stream).unwrap();
    let cfg = fast_config(Method::Dgar, 1);
    let mut ablated = cfg.clone();
    ablated.ablations.no_hp = true;
    for t in 1..4 {
        let a = build_replay_set(&cfg, &ctx, t).unwrap();
        let b = build_replay_set(&ablated, &ctx, t).unwrap();
        assert_eq!(a.num_facts(), b.num_facts());
        assert!(b.prompts.iter().all(|p| p.time < t));
    }
}
