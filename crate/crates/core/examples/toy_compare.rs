//! Runs the three methods on the synthetic stream and prints the summary.
//!
//! `cargo run --release --example toy_compare -- [seeds] [variant...]`
//!
//! A variant is a method name optionally followed by ablation flags, e.g.
//! `dgar+no_gr`.

use std::time::Instant;

use dgar_core::config::TrainConfig;
use dgar_core::data::{build_task_stream, SplitRatios};
use dgar_core::eval::{evaluate_stream, Filter};
use dgar_core::toy::{generate_toy, ToyConfig};
use dgar_core::trainer::{train_stream, NoopObserver};

fn main() -> dgar_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let variants: Vec<String> = if args.len() > 1 {
        args[1..].to_vec()
    } else {
        vec!["ft".into(), "er".into(), "dgar".into()]
    };
    for seed in 0..seeds {
        let (facts, vocab) = generate_toy(&ToyConfig {
            seed,
            ..ToyConfig::default()
        })?;
        let stream = build_task_stream(&facts, vocab, SplitRatios::default(), seed)?;
        let aug = stream.augmented()?;
        for v in &variants {
            let mut cfg = TrainConfig::toy();
            cfg.seed = seed;
            let mut parts = v.split('+');
            cfg.method = parts.next().unwrap().parse()?;
            for flag in parts {
                cfg.apply([(flag, "true")])?;
            }
            let start = Instant::now();
            let run = train_stream(&stream, &cfg, &mut NoopObserver)?;
            let models: Vec<_> = run.outcomes.iter().map(|o| o.params.clone()).collect();
            let m = evaluate_stream(&models, &aug, cfg.window, &[Filter::Raw], cfg.parallelism)?;
            let s = m[0].summary()?;
            let epochs: Vec<usize> = run.outcomes.iter().map(|o| o.epochs.len()).collect();
            println!(
                "seed {seed} {v:>14}: avg {:.4} cur {:.4} fgt {:+.4} epochs {:?} alpha {:.3} {:.1}s",
                s.average.mrr,
                s.current.mrr,
                s.forgetting.unwrap_or(0.0),
                epochs,
                run.outcomes.last().unwrap().alphas.last().unwrap(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
