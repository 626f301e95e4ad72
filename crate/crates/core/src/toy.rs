//! Synthetic temporal knowledge graph with recurring facts and a drifting
//! set of active subjects.
//!
//! Every `(subject, relation)` pair has one fixed object. At task `t` only
//! subjects in a window starting at `t · drift` (wrapping around) produce
//! facts, so pairs seen early stop being trained later on. A fixed pool of
//! facts recurs in every task.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Quadruple, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub entities: usize,
    pub relations: usize,
    pub tasks: usize,
    pub facts_per_task: usize,
    /// Fraction of each task drawn from the recurring pool.
    pub recurrence: f64,
    pub pool_size: usize,
    pub active_subjects: usize,
    pub drift: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            entities: 50,
            relations: 8,
            tasks: 10,
            facts_per_task: 200,
            recurrence: 0.3,
            pool_size: 80,
            active_subjects: 20,
            drift: 3,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.entities < 2 || self.relations == 0 || self.tasks == 0 {
            return Err(Error::Config("toy stream needs >= 2 entities, >= 1 relation, >= 1 task".into()));
        }
        if !(0.0..=1.0).contains(&self.recurrence) {
            return Err(Error::Config("recurrence must lie in [0, 1]".into()));
        }
        if self.active_subjects == 0 || self.active_subjects > self.entities {
            return Err(Error::Config("active_subjects must be in 1..=entities".into()));
        }
        Ok(())
    }
}

/// Generates the raw (un-split) facts with timestamps `0..tasks`.
pub fn generate_toy(cfg: &ToyConfig) -> Result<(Vec<Quadruple>, Vocabulary)> {
    cfg.validate()?;
    let n = cfg.entities;
    let mut rng = rng::stream(cfg.seed, &[tag::TOY]);
    let mut object_of = vec![0usize; n * cfg.relations];
    for s in 0..n {
        for r in 0..cfg.relations {
            let mut o = rng.random_range(0..n - 1);
            if o >= s {
                o += 1;
            }
            object_of[s * cfg.relations + r] = o;
        }
    }
    let mut pool = BTreeSet::new();
    let max_pool = n * (n - 1) * cfg.relations;
    while pool.len() < cfg.pool_size.min(max_pool) {
        let s = rng.random_range(0..n);
        let o = rng.random_range(0..n);
        if s != o {
            pool.insert((s, rng.random_range(0..cfg.relations), o));
        }
    }
    let pool: Vec<_> = pool.into_iter().collect();
    let recurring = ((cfg.facts_per_task as f64 * cfg.recurrence).round() as usize).min(pool.len());
    let mut facts = Vec::with_capacity(cfg.tasks * cfg.facts_per_task);
    for t in 0..cfg.tasks {
        let mut snap: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
        for i in sample(&mut rng, pool.len(), recurring) {
            snap.insert(pool[i]);
        }
        let start = t * cfg.drift;
        let pairs: Vec<(usize, usize)> = (0..cfg.active_subjects)
            .flat_map(|i| (0..cfg.relations).map(move |r| ((start + i) % n, r)))
            .collect();
        let want = cfg.facts_per_task.saturating_sub(snap.len());
        for i in sample(&mut rng, pairs.len(), want.min(pairs.len())) {
            let (s, r) = pairs[i];
            snap.insert((s, r, object_of[s * cfg.relations + r]));
        }
        facts.extend(snap.into_iter().map(|(s, r, o)| Quadruple::new(s, r, o, t)));
    }
    Ok((
        facts,
        Vocabulary {
            num_entities: n,
            num_relations: cfg.relations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = ToyConfig::default();
        let (a, v) = generate_toy(&cfg).unwrap();
        let (b, _) = generate_toy(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(v.num_entities, 50);
        for t in 0..cfg.tasks {
            let count = a.iter().filter(|q| q.timestamp == t).count();
            assert!((180..=200).contains(&count), "task {t}: {count}");
        }
        assert!(a.iter().all(|q| q.subject != q.object));
    }
}
