use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::data::Quadruple;
use crate::error::{Error, Result};
use crate::reasoner::{evolve_on_tape, score_on_tape, BoundReasoner, LayerHook, ReasonerParams, SnapshotGraph};
use crate::tensor::{log_sum_exp, Matrix};

/// Queries grouped by `(subject, relation)` with every true object as a
/// positive label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<(usize, usize)>,
    pub labels: Vec<Vec<usize>>,
}

impl QueryBatch {
    pub fn from_facts(facts: &[Quadruple]) -> Self {
        let mut grouped: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for q in facts {
            let objs = grouped.entry((q.subject, q.relation)).or_default();
            if !objs.contains(&q.object) {
                objs.push(q.object);
            }
        }
        let (queries, labels) = grouped.into_iter().unzip();
        Self { queries, labels }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

fn check_labels(labels: &[Vec<usize>], cols: usize) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() {
            return Err(Error::Contract(format!("query {i} has no positive label")));
        }
        if let Some(&e) = l.iter().find(|&&e| e >= cols) {
            return Err(Error::Domain(format!("label {e} outside {cols} entities")));
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ_{e ∈ labels} log softmax(logits)_e`.
pub fn loss_current(logits: &Matrix, labels: &[Vec<usize>]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Contract("one label set per logit row".into()));
    }
    check_labels(labels, logits.cols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        for &e in l {
            total += lse - row[e];
        }
    }
    Ok(total / labels.len() as f64)
}

pub fn loss_total(current: f64, replay: f64, mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::Domain(format!("mu must be non-negative, got {mu}")));
    }
    Ok(current + mu * replay)
}

/// Replay facts of one past time, scored on that time's history.
pub struct ReplayTerm<'g> {
    pub history: Vec<&'g SnapshotGraph>,
    pub batch: QueryBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Combine {
    /// `L_current + μ · L_replay`, each a mean over its own queries.
    Regularizer { mu: f64 },
    /// One mean over the union of current and replay queries.
    Union,
}

pub struct LossInputs<'g, 'h> {
    pub history: Vec<&'g SnapshotGraph>,
    pub current: QueryBatch,
    pub replay: Vec<ReplayTerm<'g>>,
    pub hook: Option<&'h dyn LayerHook>,
    pub combine: Combine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub current: f64,
    pub replay: f64,
}

fn batch_loss(
    tape: &mut Tape,
    bound: &BoundReasoner,
    history: &[&SnapshotGraph],
    batch: &QueryBatch,
    hook: Option<&dyn LayerHook>,
) -> Result<Var> {
    let evolved = evolve_on_tape(tape, bound, history, hook)?;
    let logits = score_on_tape(tape, bound, evolved.final_state, &batch.queries);
    check_labels(&batch.labels, tape.shape(logits).1)?;
    Ok(tape.softmax_cross_entropy(logits, batch.labels.clone()))
}

/// Builds the task loss on `tape`. Returns `(total, current, replay)`.
pub fn loss_on_tape(
    tape: &mut Tape,
    bound: &BoundReasoner,
    inputs: &LossInputs<'_, '_>,
) -> Result<(Var, Var, Option<Var>)> {
    let current = batch_loss(tape, bound, &inputs.history, &inputs.current, inputs.hook)?;
    let replay_rows: usize = inputs.replay.iter().map(|r| r.batch.len()).sum();
    let weight = match inputs.combine {
        Combine::Regularizer { mu } => {
            if !(mu >= 0.0) {
                return Err(Error::Domain(format!("mu must be non-negative, got {mu}")));
            }
            mu
        }
        Combine::Union => 1.0,
    };
    if replay_rows == 0 || weight == 0.0 {
        return Ok((current, current, None));
    }
    let mut replay: Option<Var> = None;
    for term in inputs.replay.iter().filter(|t| !t.batch.is_empty()) {
        let l = batch_loss(tape, bound, &term.history, &term.batch, None)?;
        let l = tape.scale(l, term.batch.len() as f64 / replay_rows as f64);
        replay = Some(match replay {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    let replay = replay.expect("at least one nonempty replay term");
    let total = match inputs.combine {
        Combine::Regularizer { mu } => {
            let r = tape.scale(replay, mu);
            tape.add(current, r)
        }
        Combine::Union => {
            let n_c = inputs.current.len() as f64;
            let n_r = replay_rows as f64;
            let c = tape.scale(current, n_c / (n_c + n_r));
            let r = tape.scale(replay, n_r / (n_c + n_r));
            tape.add(c, r)
        }
    };
    Ok((total, current, Some(replay)))
}

/// Loss value and gradients for every tensor in
/// [`ReasonerParams::tensors`] order.
pub fn loss_and_gradients(params: &ReasonerParams, inputs: &LossInputs<'_, '_>) -> Result<(LossValue, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (total, current, replay) = loss_on_tape(&mut tape, &bound, inputs)?;
    let value = LossValue {
        total: tape.scalar(total),
        current: tape.scalar(current),
        replay: replay.map_or(0.0, |r| tape.scalar(r)),
    };
    if !value.total.is_finite() {
        return Err(Error::Numeric("task loss became non-finite".into()));
    }
    let grads = tape.backward(total);
    let g = bound
        .vars()
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v)))
        .collect();
    Ok((value, g))
}

pub fn evaluate_loss(params: &ReasonerParams, inputs: &LossInputs<'_, '_>) -> Result<LossValue> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (total, current, replay) = loss_on_tape(&mut tape, &bound, inputs)?;
    Ok(LossValue {
        total: tape.scalar(total),
        current: tape.scalar(current),
        replay: replay.map_or(0.0, |r| tape.scalar(r)),
    })
}
