use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Quadruple, Split, TaggedFacts};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, tag};
use crate::tensor::Matrix;

use super::denoiser::{denoise, denoise_on_tape, stack_tokens, SLOT_SUBJECT, SLOT_TARGET, TOKENS};
use super::schedule::{forward_noise_with, standard_normal};
use super::DiffusionModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the cross-entropy term scoring `X̂_0` against every entity.
    pub ce_weight: f64,
    /// Weight of the subject-slot reconstruction term.
    pub subject_weight: f64,
}

impl Default for DmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            ce_weight: 1.0,
            subject_weight: 1.0,
        }
    }
}

/// Entity and relation tables supplying both the conditioning tokens and the
/// clean targets.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings<'a> {
    pub entity: &'a Matrix,
    pub relation: &'a Matrix,
}

/// Replaces the rows of `entities` in `current` by
/// `α·previous + (1-α)·current` before a continual update.
#[derive(Clone, Copy, Debug)]
pub struct ReplayBalance<'a> {
    pub previous: &'a Matrix,
    pub alpha: f64,
    pub entities: &'a BTreeSet<usize>,
}

pub fn balanced_table(current: &Matrix, balance: &ReplayBalance<'_>) -> Result<Matrix> {
    if balance.previous.shape() != current.shape() {
        return Err(Error::Contract("previous and current tables differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&balance.alpha) {
        return Err(Error::Domain(format!("balance {} outside [0, 1]", balance.alpha)));
    }
    let mut out = current.clone();
    let a = balance.alpha;
    for &e in balance.entities {
        if e >= out.rows() {
            return Err(Error::Domain(format!("replay entity {e} out of range")));
        }
        let prev = balance.previous.row(e);
        for (o, p) in out.row_mut(e).iter_mut().zip(prev) {
            *o = a * p + (1.0 - a) * *o;
        }
    }
    Ok(out)
}

fn check_inputs(model: &DiffusionModel, facts: &[Quadruple], emb: Embeddings<'_>) -> Result<()> {
    let d = model.denoiser.dim();
    if emb.entity.cols() != d || emb.relation.cols() != d {
        return Err(Error::Contract(format!("embedding tables must be {d} wide")));
    }
    for q in facts {
        if q.subject >= emb.entity.rows() || q.object >= emb.entity.rows() || q.relation >= emb.relation.rows() {
            return Err(Error::Domain(format!("fact {q:?} outside embedding tables")));
        }
    }
    Ok(())
}

fn sample_step<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    if steps < 2 {
        1
    } else {
        rng.random_range(2..=steps)
    }
}

/// Fits the denoiser to `facts` (training split only). Returns the updated
/// model and the loss of every optimizer step.
pub fn train_denoiser(
    model: &DiffusionModel,
    facts: &TaggedFacts,
    emb: Embeddings<'_>,
    cfg: &DmTrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    if facts.split != Split::Train {
        return Err(Error::Contract(format!(
            "diffusion training accepts training facts only, got {:?}",
            facts.split
        )));
    }
    check_inputs(model, &facts.facts, emb)?;
    let mut out = model.clone();
    if facts.facts.is_empty() {
        log::warn!("diffusion training called with no facts; model left unchanged");
        return Ok((out, Vec::new()));
    }
    let d = model.denoiser.dim();
    let steps = model.schedule.steps();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        out.denoiser.tensors().into_iter().map(|(_, m)| m),
    );
    let mut order: Vec<usize> = (0..facts.facts.len()).collect();
    let mut rng = rng::stream(seed, &[tag::DM_TRAIN]);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tokens = Matrix::zeros(TOKENS * batch.len(), d);
            let mut clean = Matrix::zeros(batch.len(), d);
            let mut subjects = Matrix::zeros(batch.len(), d);
            let mut ns = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (b, &i) in batch.iter().enumerate() {
                let q = facts.facts[i];
                let n = sample_step(steps, &mut rng);
                let noise = standard_normal(d, &mut rng);
                let x0 = emb.entity.row(q.object);
                let xn = forward_noise_with(x0, n, &model.schedule, &noise)?;
                tokens.set_row(TOKENS * b + SLOT_SUBJECT, emb.entity.row(q.subject));
                tokens.set_row(TOKENS * b + 1, emb.relation.row(q.relation));
                tokens.set_row(TOKENS * b + SLOT_TARGET, &xn);
                clean.set_row(b, x0);
                subjects.set_row(b, emb.entity.row(q.subject));
                ns.push(n);
                labels.push(vec![q.object]);
            }
            let mut tape = Tape::new();
            let bound = out.denoiser.bind(&mut tape, true);
            let tok = tape.constant(tokens);
            let pred = denoise_on_tape(&mut tape, &bound, tok, &ns);
            let rows = batch.len();
            let x_hat = tape.gather_rows(pred, (0..rows).map(|b| TOKENS * b + SLOT_TARGET).collect());
            let mut loss = tape.mse_rows(x_hat, clean);
            if cfg.subject_weight != 0.0 {
                let s_hat = tape.gather_rows(pred, (0..rows).map(|b| TOKENS * b + SLOT_SUBJECT).collect());
                let ls = tape.mse_rows(s_hat, subjects);
                let ls = tape.scale(ls, cfg.subject_weight);
                loss = tape.add(loss, ls);
            }
            if cfg.ce_weight != 0.0 {
                let table = tape.constant(emb.entity.clone());
                let logits = tape.matmul_t(x_hat, table);
                let ce = tape.softmax_cross_entropy(logits, labels);
                let ce = tape.scale(ce, cfg.ce_weight);
                loss = tape.add(loss, ce);
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric("diffusion loss became non-finite".into()));
            }
            let grads = tape.backward(loss);
            let g: Vec<Matrix> = bound
                .vars()
                .iter()
                .map(|&v| grads.get_or_zeros(v, tape.value(v)))
                .collect();
            let mut params = out.denoiser.tensors_mut();
            adam.step(&mut params, &g)?;
            losses.push(value);
        }
    }
    Ok((out, losses))
}

/// Pretraining on the first task's training facts.
pub fn pretrain(
    model: &DiffusionModel,
    facts: &TaggedFacts,
    emb: Embeddings<'_>,
    cfg: &DmTrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    train_denoiser(model, facts, emb, cfg, seed)
}

/// Continues training from `previous` on the current task's training facts.
/// With a balance, the conditioning and target tables are first mixed
/// toward the previous task's representations on the replayed entities.
pub fn continual_update_dm(
    previous: &DiffusionModel,
    facts: &TaggedFacts,
    emb: Embeddings<'_>,
    balance: Option<ReplayBalance<'_>>,
    cfg: &DmTrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    match balance {
        Some(b) => {
            let entity = balanced_table(emb.entity, &b)?;
            train_denoiser(
                previous,
                facts,
                Embeddings {
                    entity: &entity,
                    relation: emb.relation,
                },
                cfg,
                seed,
            )
        }
        None => train_denoiser(previous, facts, emb, cfg, seed),
    }
}

/// Mean squared error `‖X_0 - X̂_0‖²` over `facts`, with `draws` noised
/// copies per fact at uniformly drawn steps. Deterministic in `seed`.
pub fn reconstruction_error(
    model: &DiffusionModel,
    facts: &[Quadruple],
    emb: Embeddings<'_>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    check_inputs(model, facts, emb)?;
    if facts.is_empty() || draws == 0 {
        return Err(Error::EmptyDataset("no facts to evaluate reconstruction on".into()));
    }
    let d = model.denoiser.dim();
    let steps = model.schedule.steps();
    let mut rng = rng::stream(seed, &[tag::DM_EVAL]);
    let mut total = 0.0;
    let mut count = 0usize;
    for q in facts {
        let x0 = emb.entity.row(q.object);
        let mut noised = Vec::with_capacity(draws);
        let mut ns = Vec::with_capacity(draws);
        for _ in 0..draws {
            let n = rng.random_range(1..=steps);
            let noise = standard_normal(d, &mut rng);
            noised.push(forward_noise_with(x0, n, &model.schedule, &noise)?);
            ns.push(n);
        }
        let triples: Vec<_> = noised
            .iter()
            .map(|x| (emb.entity.row(q.subject), emb.relation.row(q.relation), x.as_slice()))
            .collect();
        let out = denoise(&model.denoiser, &stack_tokens(&triples, d), &ns);
        for b in 0..draws {
            let row = out.row(TOKENS * b + SLOT_TARGET);
            total += row.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
