//! Historical context prompts: the triples surrounding a query entity at one
//! past time, sampled over `k` distinct times.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{inverse_relation, Quadruple, Snapshot};
use crate::error::{Error, Result};

/// Triples `(s, r, e_q)` directed toward `entity` at `time`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoricalContextPrompt {
    pub entity: usize,
    pub time: usize,
    pub triples: Vec<(usize, usize, usize)>,
}

impl HistoricalContextPrompt {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn facts(&self) -> impl Iterator<Item = Quadruple> + '_ {
        self.triples
            .iter()
            .map(move |&(s, r, o)| Quadruple::new(s, r, o, self.time))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySet {
    pub prompts: Vec<HistoricalContextPrompt>,
    /// Every entity appearing in any prompt triple.
    pub entities: BTreeSet<usize>,
}

impl ReplaySet {
    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn facts(&self) -> Vec<Quadruple> {
        self.prompts.iter().flat_map(|p| p.facts()).collect()
    }

    pub fn num_facts(&self) -> usize {
        self.prompts.iter().map(|p| p.triples.len()).sum()
    }

    pub fn to_debug_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Entity-centric view over all snapshots strictly before `current_task`.
#[derive(Clone, Debug)]
pub struct HistoryIndex {
    current_task: usize,
    /// entity → time → incoming `(s, r)` pairs (both orientations).
    incident: BTreeMap<usize, BTreeMap<usize, BTreeSet<(usize, usize)>>>,
}

impl HistoryIndex {
    pub fn new(history: &[Snapshot], num_relations: usize, current_task: usize) -> Result<Self> {
        let mut incident: BTreeMap<usize, BTreeMap<usize, BTreeSet<(usize, usize)>>> = BTreeMap::new();
        for snap in history {
            if snap.timestamp() >= current_task {
                return Err(Error::TemporalLeak {
                    time: snap.timestamp(),
                    current: current_task,
                });
            }
            let t = snap.timestamp();
            for q in snap.facts() {
                incident
                    .entry(q.object)
                    .or_default()
                    .entry(t)
                    .or_default()
                    .insert((q.subject, q.relation));
                // (e_q, r, o) seen from e_q's side is (o, r⁻¹, e_q)
                incident
                    .entry(q.subject)
                    .or_default()
                    .entry(t)
                    .or_default()
                    .insert((q.object, inverse_relation(q.relation, num_relations)));
            }
        }
        Ok(Self {
            current_task,
            incident,
        })
    }

    pub fn current_task(&self) -> usize {
        self.current_task
    }

    /// Times at which `entity` has a nonempty prompt, ascending.
    pub fn times_for(&self, entity: usize) -> Vec<usize> {
        self.incident
            .get(&entity)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn all_facts(&self) -> Vec<Quadruple> {
        let mut out = Vec::new();
        for (&e, by_time) in &self.incident {
            for (&t, pairs) in by_time {
                out.extend(pairs.iter().map(|&(s, r)| Quadruple::new(s, r, e, t)));
            }
        }
        out
    }
}

pub fn build_hcp(entity: usize, time: usize, index: &HistoryIndex) -> Result<HistoricalContextPrompt> {
    if time >= index.current_task {
        return Err(Error::TemporalLeak {
            time,
            current: index.current_task,
        });
    }
    let triples = index
        .incident
        .get(&entity)
        .and_then(|m| m.get(&time))
        .map(|pairs| pairs.iter().map(|&(s, r)| (s, r, entity)).collect())
        .unwrap_or_default();
    Ok(HistoricalContextPrompt {
        entity,
        time,
        triples,
    })
}

/// Samples `min(k, |T_e|)` of the entity's nonempty historical times
/// uniformly without replacement and builds one prompt per time.
pub fn sample_prompts<R: Rng + ?Sized>(entity: usize, k: usize, index: &HistoryIndex, rng: &mut R) -> Result<ReplaySet> {
    let times = index.times_for(entity);
    if k == 0 || times.is_empty() {
        return Ok(ReplaySet::default());
    }
    let chosen: Vec<usize> = if k >= times.len() {
        times
    } else {
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, times.len(), k)
            .into_iter()
            .map(|i| times[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let prompts = chosen
        .into_iter()
        .map(|t| build_hcp(entity, t, index))
        .collect::<Result<Vec<_>>>()?;
    let entities = collect_replay_entities(&prompts);
    Ok(ReplaySet { prompts, entities })
}

/// Union of heads and tails of every prompt triple.
pub fn collect_replay_entities(prompts: &[HistoricalContextPrompt]) -> BTreeSet<usize> {
    prompts
        .iter()
        .flat_map(|p| p.triples.iter().flat_map(|&(s, _, o)| [s, o]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn snap(t: usize, facts: &[(usize, usize, usize)]) -> Snapshot {
        Snapshot::new(t, facts.iter().map(|&(s, r, o)| Quadruple::new(s, r, o, t)).collect()).unwrap()
    }

    #[test]
    fn direct_membership() {
        let hist = vec![snap(2, &[(4, 0, 7)])];
        let idx = HistoryIndex::new(&hist, 2, 3).unwrap();
        assert_eq!(build_hcp(7, 2, &idx).unwrap().triples, vec![(4, 0, 7)]);
        assert!(build_hcp(8, 2, &idx).unwrap().is_empty());
    }

    #[test]
    fn both_orientations() {
        let hist = vec![snap(3, &[(1, 0, 9), (9, 1, 5)])];
        let idx = HistoryIndex::new(&hist, 2, 4).unwrap();
        let p = build_hcp(9, 3, &idx).unwrap();
        // 1⁻¹ = 1 + 2
        let got: BTreeSet<_> = p.triples.into_iter().collect();
        assert_eq!(got, BTreeSet::from([(1, 0, 9), (5, 3, 9)]));
    }

    #[test]
    fn temporal_leak_rejected() {
        let hist = vec![snap(1, &[(0, 0, 1)])];
        let idx = HistoryIndex::new(&hist, 1, 2).unwrap();
        assert!(matches!(build_hcp(0, 2, &idx), Err(Error::TemporalLeak { .. })));
        assert!(matches!(
            HistoryIndex::new(&hist, 1, 1),
            Err(Error::TemporalLeak { time: 1, current: 1 })
        ));
    }

    #[test]
    fn degenerate_k_and_exhaustive_k() {
        let hist: Vec<Snapshot> = (0..4).map(|t| snap(t, &[(t, 0, 10)])).collect();
        let idx = HistoryIndex::new(&hist, 1, 4).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(sample_prompts(10, 0, &idx, &mut r).unwrap().is_empty());
        let all = sample_prompts(10, 9, &idx, &mut r).unwrap();
        let times: Vec<usize> = all.prompts.iter().map(|p| p.time).collect();
        assert_eq!(times, vec![0, 1, 2, 3]);
        assert_eq!(all.entities, BTreeSet::from([0, 1, 2, 3, 10]));
        assert!(sample_prompts(99, 3, &idx, &mut r).unwrap().is_empty());
    }

    #[test]
    fn replay_entities() {
        let p = HistoricalContextPrompt {
            entity: 7,
            time: 0,
            triples: vec![(4, 0, 7)],
        };
        assert_eq!(collect_replay_entities(&[p]), BTreeSet::from([4, 7]));
        assert!(collect_replay_entities(&[]).is_empty());
    }

    #[test]
    fn replay_entities_match_loop_union() {
        use rand::Rng;
        let mut r = rng::stream(3, &[]);
        let prompts: Vec<HistoricalContextPrompt> = (0..4)
            .map(|t| HistoricalContextPrompt {
                entity: 1,
                time: t,
                triples: (0..5).map(|_| (r.random_range(0..30), r.random_range(0..4), r.random_range(0..30))).collect(),
            })
            .collect();
        let mut oracle = BTreeSet::new();
        for p in &prompts {
            for t in &p.triples {
                oracle.insert(t.0);
                oracle.insert(t.2);
            }
        }
        assert_eq!(collect_replay_entities(&prompts), oracle);
    }

    #[test]
    fn same_seed_same_replay_set() {
        let hist: Vec<Snapshot> = (0..10).map(|t| snap(t, &[(t, 0, 20), (20, 1, t + 1)])).collect();
        let idx = HistoryIndex::new(&hist, 2, 10).unwrap();
        let a = sample_prompts(20, 4, &idx, &mut rng::stream(5, &[1])).unwrap();
        let b = sample_prompts(20, 4, &idx, &mut rng::stream(5, &[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prompts.len(), 4);
    }
}
