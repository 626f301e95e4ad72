//! Sequential vs rayon execution of the two embarrassingly parallel hot
//! paths: guided reverse generation and stream evaluation.
//!
//! `cargo bench -p dgar-core --bench parallel`

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgar_core::data::{build_task_stream, SplitRatios};
use dgar_core::diffusion::{generate, DecoderScorer, DiffusionModel, GenerationContext, GenerationJob, NoiseSchedule, ReverseOptions};
use dgar_core::eval::{evaluate_stream, Filter};
use dgar_core::par::Parallelism;
use dgar_core::reasoner::{evolve, ReasonerParams, TaskGraphs};
use dgar_core::rng;
use dgar_core::toy::{generate_toy, ToyConfig};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn bench_generation(c: &mut Criterion) {
    let (facts, vocab) = generate_toy(&ToyConfig::default()).unwrap();
    let stream = build_task_stream(&facts, vocab, SplitRatios::default(), 0).unwrap().augmented().unwrap();
    let graphs = TaskGraphs::new(&stream).unwrap();
    let dim = 24;
    let params = ReasonerParams::init(vocab, dim, 2, &mut rng::stream(0, &[1]));
    let states = evolve(&params, &graphs.history(5, 3), None).unwrap().final_state;
    let scorer = DecoderScorer::new(params.clone(), states.clone(), 0.5).unwrap();
    let schedule = NoiseSchedule::linear(20, 1e-4, 0.2).unwrap();
    let model = DiffusionModel::init(dim, schedule, 2, &mut rng::stream(0, &[2]));
    let ctx = GenerationContext {
        entity: &states,
        relation: &params.relation,
        scorer: Some(&scorer),
    };
    let jobs: Vec<GenerationJob> = stream.tasks[4]
        .train
        .iter()
        .take(256)
        .enumerate()
        .map(|(i, q)| GenerationJob {
            subject: q.subject,
            relation: q.relation,
            target: q.object,
            context: 0,
            seed: rng::derive_seed(0, &[i as u64]),
        })
        .collect();

    let mut group = c.benchmark_group("generate_256_chains");
    group.sample_size(10);
    for (name, mode) in MODES {
        let opts = ReverseOptions {
            guidance: 1.0,
            parallelism: mode,
            batch: 32,
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| generate(&model, &[ctx], &jobs, opts).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let (facts, vocab) = generate_toy(&ToyConfig::default()).unwrap();
    let stream = build_task_stream(&facts, vocab, SplitRatios::default(), 0).unwrap().augmented().unwrap();
    let models: Vec<ReasonerParams> = (0..stream.len())
        .map(|t| ReasonerParams::init(vocab, 24, 2, &mut rng::stream(t as u64, &[3])))
        .collect();

    let mut group = c.benchmark_group("evaluate_stream_10_tasks");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate_stream(&models, &stream, 3, &[Filter::Raw, Filter::TimeAware], mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generation, bench_evaluation);
criterion_main!(benches);
