#![allow(dead_code)]

use dgar_core::data::{build_task_stream, SplitRatios, TaskStream, Vocabulary};
use dgar_core::diffusion::{DiffusionModel, NoiseSchedule};
use dgar_core::reasoner::ReasonerParams;
use dgar_core::rng;
use dgar_core::tensor::Matrix;
use dgar_core::toy::{generate_toy, ToyConfig};

/// A reduced toy stream that trains in well under a second.
pub fn small_stream(tasks: usize, seed: u64) -> TaskStream {
    let cfg = ToyConfig {
        entities: 20,
        relations: 4,
        tasks,
        facts_per_task: 60,
        pool_size: 30,
        active_subjects: 10,
        seed,
        ..ToyConfig::default()
    };
    let (facts, vocab) = generate_toy(&cfg).unwrap();
    build_task_stream(&facts, vocab, SplitRatios::default(), seed).unwrap()
}

pub fn vocab(entities: usize, relations: usize) -> Vocabulary {
    Vocabulary {
        num_entities: entities,
        num_relations: relations,
    }
}

pub fn reasoner(entities: usize, relations: usize, dim: usize, layers: usize, seed: u64) -> ReasonerParams {
    ReasonerParams::init(vocab(entities, relations), dim, layers, &mut rng::stream(seed, &[]))
}

pub fn diffusion(dim: usize, steps: usize, seed: u64) -> DiffusionModel {
    let schedule = NoiseSchedule::linear(steps, 1e-3, 0.2).unwrap();
    DiffusionModel::init(dim, schedule, 1, &mut rng::stream(seed, &[]))
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut rng::stream(seed, &[]))
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

/// Iterates `X_n = √(1-β_n) X_{n-1} + √β_n ε` from `x0`.
pub fn iterated_chain<R: rand::Rng>(x0: &[f64], betas: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let mut x = x0.to_vec();
    for &b in &betas[..n] {
        let eps = dgar_core::diffusion::standard_normal(x.len(), rng);
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi = (1.0 - b).sqrt() * *xi + b.sqrt() * e;
        }
    }
    x
}

/// Sample mean and covariance of equal-width rows.
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (a, x) in mean.iter_mut().zip(s) {
            *a += x / m;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (m - 1.0);
            }
        }
    }
    (mean, cov)
}

/// Largest deviation, in standard errors, of the sample moments from the
/// Gaussian `N(mean, var·I)`.
pub fn moment_z_score(samples: &[Vec<f64>], mean: &[f64], var: f64) -> f64 {
    let m = samples.len() as f64;
    let (mu, cov) = moments(samples);
    let mut worst: f64 = 0.0;
    for i in 0..mean.len() {
        worst = worst.max((mu[i] - mean[i]).abs() / (var / m).sqrt());
        for j in 0..mean.len() {
            let (target, se) = if i == j {
                (var, var * (2.0 / (m - 1.0)).sqrt())
            } else {
                (0.0, var / m.sqrt())
            };
            worst = worst.max((cov[i][j] - target).abs() / se);
        }
    }
    worst
}

/// Toy preset shrunk further for fast stream-level tests.
pub fn fast_config(method: dgar_core::config::Method, seed: u64) -> dgar_core::config::TrainConfig {
    let mut cfg = dgar_core::config::TrainConfig::toy();
    cfg.method = method;
    cfg.seed = seed;
    cfg.dim = 8;
    cfg.epochs = 6;
    cfg.dm_steps = 6;
    cfg.dm_epochs = 2;
    cfg
}
