//! Quadruple ingestion, inverse augmentation and the per-time task stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// One timestamped fact `(subject, relation, object, timestamp)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub timestamp: usize,
}

impl Quadruple {
    pub const fn new(subject: usize, relation: usize, object: usize, timestamp: usize) -> Self {
        Self {
            subject,
            relation,
            object,
            timestamp,
        }
    }

    /// `(o, r⁻¹, s, t)` where `r⁻¹ = r + R` for base relations and `r - R`
    /// for inverse ones.
    pub fn inverse(&self, num_relations: usize) -> Self {
        Self {
            subject: self.object,
            relation: inverse_relation(self.relation, num_relations),
            object: self.subject,
            timestamp: self.timestamp,
        }
    }

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.subject, self.relation, self.object)
    }
}

pub fn inverse_relation(r: usize, num_relations: usize) -> usize {
    if r < num_relations {
        r + num_relations
    } else {
        r - num_relations
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_entities: usize,
    /// Base relations; inverse ids occupy `[R, 2R)`.
    pub num_relations: usize,
}

impl Vocabulary {
    pub fn check(&self, q: &Quadruple, augmented: bool) -> Result<()> {
        let rel_bound = if augmented {
            2 * self.num_relations
        } else {
            self.num_relations
        };
        if q.subject >= self.num_entities || q.object >= self.num_entities {
            return Err(Error::Domain(format!(
                "entity id out of range in {q:?} (num_entities = {})",
                self.num_entities
            )));
        }
        if q.relation >= rel_bound {
            return Err(Error::Domain(format!(
                "relation id {} out of range (bound {rel_bound})",
                q.relation
            )));
        }
        Ok(())
    }
}

/// Reads a whitespace-separated `subject relation object raw_time` file.
///
/// Raw times are divided by `granularity` and then re-indexed densely from
/// zero in ascending order.
pub fn load_quadruples(path: &Path, granularity: u64) -> Result<(Vec<Quadruple>, Vocabulary)> {
    if granularity == 0 {
        return Err(Error::Domain("granularity must be positive".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut vals = [0u64; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f
                .parse::<u64>()
                .map_err(|e| parse_err(format!("field {f:?}: {e}")))?;
        }
        if vals[3] % granularity != 0 {
            return Err(parse_err(format!(
                "time {} is not a multiple of granularity {granularity}",
                vals[3]
            )));
        }
        raw.push((vals[0] as usize, vals[1] as usize, vals[2] as usize, vals[3] / granularity));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let times: BTreeSet<u64> = raw.iter().map(|f| f.3).collect();
    let dense: BTreeMap<u64, usize> = times.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
    let facts: Vec<Quadruple> = raw
        .into_iter()
        .map(|(s, r, o, t)| Quadruple::new(s, r, o, dense[&t]))
        .collect();
    let vocab = Vocabulary {
        num_entities: facts.iter().map(|q| q.subject.max(q.object)).max().unwrap_or(0) + 1,
        num_relations: facts.iter().map(|q| q.relation).max().unwrap_or(0) + 1,
    };
    Ok((facts, vocab))
}

/// Returns `facts ∪ {inverse(f)}` as a sorted set.
pub fn add_inverse(facts: &[Quadruple], num_relations: usize) -> Result<Vec<Quadruple>> {
    let mut out = BTreeSet::new();
    for q in facts {
        if q.relation >= num_relations {
            return Err(Error::Domain(format!(
                "relation {} >= num_relations {num_relations}",
                q.relation
            )));
        }
        out.insert(*q);
        out.insert(q.inverse(num_relations));
    }
    Ok(out.into_iter().collect())
}

/// All facts sharing one timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    timestamp: usize,
    facts: Vec<Quadruple>,
}

impl Snapshot {
    /// Sorts and deduplicates `facts`; fails if any fact carries another
    /// timestamp.
    pub fn new(timestamp: usize, mut facts: Vec<Quadruple>) -> Result<Self> {
        if let Some(q) = facts.iter().find(|q| q.timestamp != timestamp) {
            return Err(Error::Contract(format!(
                "fact {q:?} does not belong to snapshot {timestamp}"
            )));
        }
        facts.sort_unstable();
        facts.dedup();
        Ok(Self { timestamp, facts })
    }

    pub fn empty(timestamp: usize) -> Self {
        Self {
            timestamp,
            facts: Vec::new(),
        }
    }

    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Facts carrying the split they were drawn from, so consumers that must
/// only ever see training data can check it.
#[derive(Clone, Debug)]
pub struct TaggedFacts {
    pub split: Split,
    pub facts: Vec<Quadruple>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub timestamp: usize,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
}

impl Task {
    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn tagged(&self, split: Split) -> TaggedFacts {
        TaggedFacts {
            split,
            facts: self.split(split).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Domain(format!("split ratios out of [0,1]: {all:?}")));
        }
        if ((self.train + self.valid + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("split ratios must sum to 1: {all:?}")));
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes: valid and test are floored, train takes
    /// the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let valid = (n as f64 * self.valid).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        (n - valid - test, valid, test)
    }
}

/// The continual task stream: one task per timestamp in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub vocab: Vocabulary,
    /// Whether inverse facts have been added within each split.
    pub augmented: bool,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Adds inverse facts within each split of every task.
    pub fn augmented(&self) -> Result<TaskStream> {
        if self.augmented {
            return Ok(self.clone());
        }
        let r = self.vocab.num_relations;
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                Ok(Task {
                    timestamp: t.timestamp,
                    train: add_inverse(&t.train, r)?,
                    valid: add_inverse(&t.valid, r)?,
                    test: add_inverse(&t.test, r)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TaskStream {
            tasks,
            vocab: self.vocab,
            augmented: true,
        })
    }

    /// Training split of task `t` as a snapshot.
    pub fn train_snapshot(&self, t: usize) -> Snapshot {
        let task = &self.tasks[t];
        Snapshot::new(task.timestamp, task.train.clone()).expect("task facts share a timestamp")
    }

    /// Ground-truth objects per `(subject, relation)` over all splits of
    /// task `t`, for time-aware filtering.
    pub fn known_objects(&self, t: usize) -> BTreeMap<(usize, usize), BTreeSet<usize>> {
        let mut out: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        let task = &self.tasks[t];
        for q in task.train.iter().chain(&task.valid).chain(&task.test) {
            out.entry((q.subject, q.relation)).or_default().insert(q.object);
        }
        out
    }

    /// Stable content digest of every fact and the vocabulary.
    pub fn digest(&self) -> String {
        let mut text = format!(
            "{} {} {}\n",
            self.vocab.num_entities, self.vocab.num_relations, self.augmented
        );
        for t in &self.tasks {
            for (name, part) in [("train", &t.train), ("valid", &t.valid), ("test", &t.test)] {
                for q in part.iter() {
                    let _ = writeln!(text, "{name} {} {} {} {}", q.subject, q.relation, q.object, q.timestamp);
                }
            }
        }
        crate::checkpoint::sha256_hex(text.as_bytes())
    }
}

/// Groups facts by timestamp, shuffles each snapshot with a seeded stream
/// and splits it by `ratios`. Timestamps are re-indexed densely so that a
/// task's index equals its timestamp.
pub fn build_task_stream(
    facts: &[Quadruple],
    vocab: Vocabulary,
    ratios: SplitRatios,
    seed: u64,
) -> Result<TaskStream> {
    ratios.validate()?;
    if facts.is_empty() {
        return Err(Error::EmptyDataset("no facts to split".into()));
    }
    let mut by_time: BTreeMap<usize, BTreeSet<Quadruple>> = BTreeMap::new();
    for q in facts {
        vocab.check(q, false)?;
        by_time.entry(q.timestamp).or_default().insert(*q);
    }
    let mut tasks = Vec::with_capacity(by_time.len());
    for (index, (raw_time, set)) in by_time.into_iter().enumerate() {
        let mut snapshot: Vec<Quadruple> = set
            .into_iter()
            .map(|q| Quadruple { timestamp: index, ..q })
            .collect();
        let mut rng = rng::stream(seed, &[tag::SPLIT, index as u64]);
        snapshot.shuffle(&mut rng);
        let n = snapshot.len();
        let (train, valid, test) = if n < 3 {
            warn!("snapshot at time {raw_time} has {n} facts; all assigned to train");
            (snapshot, Vec::new(), Vec::new())
        } else {
            let (n_train, n_valid, _) = ratios.sizes(n);
            let test = snapshot.split_off(n_train + n_valid);
            let valid = snapshot.split_off(n_train);
            (snapshot, valid, test)
        };
        let sorted = |mut v: Vec<Quadruple>| {
            v.sort_unstable();
            v
        };
        tasks.push(Task {
            timestamp: index,
            train: sorted(train),
            valid: sorted(valid),
            test: sorted(test),
        });
    }
    Ok(TaskStream {
        tasks,
        vocab,
        augmented: false,
    })
}

const VOCAB_FILE: &str = "vocab.txt";

fn task_dir(root: &Path, t: usize) -> std::path::PathBuf {
    root.join(format!("task_{t:04}"))
}

fn write_facts(path: &Path, facts: &[Quadruple]) -> Result<()> {
    let mut text = String::with_capacity(facts.len() * 16);
    for q in facts {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.timestamp);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_facts(path: &Path) -> Result<Vec<Quadruple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<usize> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            if v.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 4 fields, found {}", v.len()),
                });
            }
            Ok(Quadruple::new(v[0], v[1], v[2], v[3]))
        })
        .collect()
}

/// Writes the canonical dataset layout: `vocab.txt` plus one
/// `task_NNNN/{train,valid,test}.txt` directory per task (un-augmented).
pub fn write_dataset(root: &Path, stream: &TaskStream) -> Result<()> {
    if stream.augmented {
        return Err(Error::Contract("datasets are stored without inverse facts".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let header = format!(
        "entities\t{}\nrelations\t{}\ntasks\t{}\n",
        stream.vocab.num_entities,
        stream.vocab.num_relations,
        stream.len()
    );
    let vocab_path = root.join(VOCAB_FILE);
    fs::write(&vocab_path, header).map_err(|e| Error::io(&vocab_path, e))?;
    for (t, task) in stream.tasks.iter().enumerate() {
        let dir = task_dir(root, t);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_facts(&dir.join("train.txt"), &task.train)?;
        write_facts(&dir.join("valid.txt"), &task.valid)?;
        write_facts(&dir.join("test.txt"), &task.test)?;
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<TaskStream> {
    let vocab_path = root.join(VOCAB_FILE);
    let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let mut fields = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match (it.next(), it.next().map(str::parse::<usize>)) {
            (Some(k), Some(Ok(v))) => {
                fields.insert(k.to_string(), v);
            }
            (None, _) => {}
            _ => {
                return Err(Error::Parse {
                    path: vocab_path.clone(),
                    line: i + 1,
                    message: format!("bad header line {line:?}"),
                })
            }
        }
    }
    let get = |k: &str| {
        fields.get(k).copied().ok_or_else(|| Error::Parse {
            path: vocab_path.clone(),
            line: 0,
            message: format!("missing key {k}"),
        })
    };
    let vocab = Vocabulary {
        num_entities: get("entities")?,
        num_relations: get("relations")?,
    };
    let n_tasks = get("tasks")?;
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let dir = task_dir(root, t);
        let task = Task {
            timestamp: t,
            train: read_facts(&dir.join("train.txt"))?,
            valid: read_facts(&dir.join("valid.txt"))?,
            test: read_facts(&dir.join("test.txt"))?,
        };
        for q in task.train.iter().chain(&task.valid).chain(&task.test) {
            vocab.check(q, false)?;
            if q.timestamp != t {
                return Err(Error::Contract(format!("fact {q:?} stored under task {t}")));
            }
        }
        tasks.push(task);
    }
    Ok(TaskStream {
        tasks,
        vocab,
        augmented: false,
    })
}
