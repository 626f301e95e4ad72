//! Ranking metrics and the task-by-task evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Quadruple, TaskStream};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::reasoner::{evolve, score, ReasonerParams, TaskGraphs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Filter {
    Raw,
    TimeAware,
}

impl Filter {
    pub fn label(self) -> &'static str {
        match self {
            Filter::Raw => "raw",
            Filter::TimeAware => "time-aware",
        }
    }
}

/// Expected rank of `target` under uniformly random tie-breaking. Entities
/// in `known_true` other than the target are removed first.
pub fn rank_query(scores: &[f64], target: usize, known_true: Option<&BTreeSet<usize>>) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::Domain(format!("target {target} outside {} candidates", scores.len())));
    }
    let t = scores[target];
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite score for target {target}")));
    }
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (e, &s) in scores.iter().enumerate() {
        if e == target || known_true.is_some_and(|k| k.contains(&e)) {
            continue;
        }
        if s > t {
            greater += 1;
        } else if s == t {
            ties += 1;
        }
    }
    Ok(1.0 + greater as f64 + ties as f64 / 2.0)
}

pub fn mrr(ranks: &[f64]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("MRR of an empty rank list".into()));
    }
    Ok(ranks.iter().map(|r| 1.0 / r).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at_k(ranks: &[f64], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("Hits@k of an empty rank list".into()));
    }
    if k == 0 {
        return Err(Error::Domain("Hits@k needs k >= 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl CellMetrics {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        Ok(Self {
            mrr: mrr(ranks)?,
            hits1: hits_at_k(ranks, 1)?,
            hits3: hits_at_k(ranks, 3)?,
            hits10: hits_at_k(ranks, 10)?,
            queries: ranks.len(),
        })
    }

    fn mean(cells: &[CellMetrics]) -> Self {
        let n = cells.len().max(1) as f64;
        Self {
            mrr: cells.iter().map(|c| c.mrr).sum::<f64>() / n,
            hits1: cells.iter().map(|c| c.hits1).sum::<f64>() / n,
            hits3: cells.iter().map(|c| c.hits3).sum::<f64>() / n,
            hits10: cells.iter().map(|c| c.hits10).sum::<f64>() / n,
            queries: cells.iter().map(|c| c.queries).sum(),
        }
    }
}

/// Ranks of every fact's object against all entities.
pub fn rank_facts(
    params: &ReasonerParams,
    h_final: &crate::tensor::Matrix,
    facts: &[Quadruple],
    known: Option<&BTreeMap<(usize, usize), BTreeSet<usize>>>,
) -> Result<Vec<f64>> {
    let queries: Vec<(usize, usize)> = facts.iter().map(|q| (q.subject, q.relation)).collect();
    let scores = score(params, h_final, &queries)?;
    facts
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let filter = known.and_then(|k| k.get(&(q.subject, q.relation)));
            rank_query(scores.row(i), q.object, filter)
        })
        .collect()
}

/// `p[i][j]` for `j ≤ i`: the model trained through task `i` on task `j`'s
/// test facts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub filter: Filter,
    pub cells: Vec<Vec<CellMetrics>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub current: CellMetrics,
    pub average: CellMetrics,
    pub forgetting: Option<f64>,
}

impl MetricsMatrix {
    pub fn num_tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&CellMetrics> {
        self.cells.get(i).and_then(|row| row.get(j))
    }

    pub fn mrr_rows(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|c| c.mrr).collect()).collect()
    }

    pub fn summary(&self) -> Result<Summary> {
        let last = self
            .cells
            .last()
            .ok_or_else(|| Error::Contract("empty metrics matrix".into()))?;
        let current = *last.last().ok_or_else(|| Error::Contract("empty last row".into()))?;
        let forgetting = if self.num_tasks() >= 2 {
            Some(forgetting_score(&self.mrr_rows())?)
        } else {
            None
        };
        Ok(Summary {
            current,
            average: CellMetrics::mean(last),
            forgetting,
        })
    }
}

/// Mean over `1 < i ≤ n` of `p[n][i] - p[i][i]` (1-based), on a
/// lower-triangular matrix with row `i` holding `p[i][0..=i]`.
pub fn forgetting_score(p: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    if n < 2 {
        return Err(Error::Contract("forgetting needs at least two tasks".into()));
    }
    for (i, row) in p.iter().enumerate() {
        if row.len() < i + 1 {
            return Err(Error::Contract(format!("row {i} lacks its diagonal entry")));
        }
    }
    let last = &p[n - 1];
    let total: f64 = (1..n).map(|i| last[i] - p[i][i]).sum();
    Ok(total / (n - 1) as f64)
}

/// Evaluates every completed model on every test set seen so far.
/// `models[i]` is the model after task `i`; the stream must be augmented.
pub fn evaluate_stream(
    models: &[ReasonerParams],
    stream: &TaskStream,
    window: usize,
    filters: &[Filter],
    parallelism: Parallelism,
) -> Result<Vec<MetricsMatrix>> {
    if !stream.augmented {
        return Err(Error::Contract("evaluation expects inverse facts in every split".into()));
    }
    if models.len() > stream.len() {
        return Err(Error::Contract("more models than tasks".into()));
    }
    let graphs = TaskGraphs::new(stream)?;
    let known: Vec<_> = (0..stream.len()).map(|t| stream.known_objects(t)).collect();
    let cells: Vec<(usize, usize)> = (0..models.len()).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let results = par::try_map(parallelism, &cells, |&(i, j)| -> Result<Vec<CellMetrics>> {
        let facts = &stream.tasks[j].test;
        if facts.is_empty() {
            return Ok(vec![CellMetrics::default(); filters.len()]);
        }
        let stack = evolve(&models[i], &graphs.history(j, window), None)?;
        filters
            .iter()
            .map(|f| {
                let k = (*f == Filter::TimeAware).then_some(&known[j]);
                CellMetrics::from_ranks(&rank_facts(&models[i], &stack.final_state, facts, k)?)
            })
            .collect()
    })?;
    let mut out: Vec<MetricsMatrix> = filters
        .iter()
        .map(|&filter| MetricsMatrix {
            filter,
            cells: (0..models.len()).map(|i| Vec::with_capacity(i + 1)).collect(),
        })
        .collect();
    for (&(i, _), cell) in cells.iter().zip(results) {
        for (m, c) in out.iter_mut().zip(cell) {
            m.cells[i].push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_query(&[0.1, 0.9, 0.2], 1, None).unwrap(), 1.0);
        assert_eq!(rank_query(&[1.0; 5], 2, None).unwrap(), 3.0);
        assert_eq!(rank_query(&[0.9, 0.5, 0.7], 1, None).unwrap(), 3.0);
        let known = BTreeSet::from([0, 1]);
        assert_eq!(rank_query(&[0.9, 0.5, 0.7], 1, Some(&known)).unwrap(), 2.0);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mrr(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((mrr(&[1.0, 2.0, 4.0]).unwrap() - 0.583_333_333_333_333_3).abs() < 1e-15);
        assert!((hits_at_k(&[1.0, 11.0, 10.0], 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mrr(&[]).is_err());
        assert!(hits_at_k(&[], 1).is_err());
    }

    #[test]
    fn forgetting_example() {
        let p = vec![vec![0.7], vec![0.6, 0.5], vec![0.3, 0.6, 0.4]];
        assert!((forgetting_score(&p).unwrap() - 0.05).abs() < 1e-12);
        assert!(forgetting_score(&p[..1]).is_err());
    }
}
