//! Task-by-task training over the stream, for the generative-replay method
//! and the fine-tuning and buffer-replay baselines.

mod loss;
mod reservoir;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tape;
use crate::config::{Method, TrainConfig};
use crate::data::{Quadruple, Snapshot, Split, TaggedFacts, TaskStream};
use crate::diffusion::{
    aggregate_replay, continual_update_dm, generate, pretrain, DecoderScorer, DiffusionModel, DmTrainConfig,
    Embeddings, GenerationContext, GenerationJob, NoiseSchedule, ReplayBalance, ReverseOptions,
};
use crate::error::{Error, Result};
use crate::eval::{mrr, rank_facts};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::reasoner::{evolve, BoundReasoner, LayerHook, ReasonerParams, TaskGraphs};
use crate::replay::{BalanceMode, DarHook, ReplayInjection};
use crate::rng::{self, tag};
use crate::sampler::{collect_replay_entities, sample_prompts, HistoricalContextPrompt, HistoryIndex, ReplaySet};
use crate::tensor::Matrix;

pub use loss::{
    evaluate_loss, loss_and_gradients, loss_current, loss_on_tape, loss_total, Combine, LossInputs, LossValue,
    QueryBatch, ReplayTerm,
};
pub use reservoir::Reservoir;

/// Call counts of the replay machinery over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub generation_calls: usize,
    pub generated_vectors: usize,
    pub hook_calls: usize,
    pub dm_updates: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub total: f64,
    pub current: f64,
    pub replay: f64,
    pub valid_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub task: usize,
    pub params: ReasonerParams,
    pub diffusion: Option<DiffusionModel>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub alphas: Vec<f64>,
    pub replay_entities: usize,
    pub replay_facts: usize,
    pub dm_losses: Vec<f64>,
}

/// Hooks into the task loop.
pub trait TrainObserver {
    /// Called once `initial` (the task's starting parameters) is built and
    /// before any update.
    fn task_start(&mut self, _task: usize, _previous: Option<&ReasonerParams>, _initial: &ReasonerParams) {}

    fn task_end(&mut self, _outcome: &TaskOutcome) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Everything carried from one task to the next.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub params: Option<ReasonerParams>,
    pub diffusion: Option<DiffusionModel>,
    pub buffer: Reservoir<Quadruple>,
    pub stats: RunStats,
}

impl StreamState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            params: None,
            diffusion: None,
            buffer: Reservoir::new(cfg.er_capacity, rng::stream(cfg.seed, &[tag::ER])),
            stats: RunStats::default(),
        }
    }
}

/// Augmented stream plus its snapshot graphs.
pub struct StreamContext {
    pub stream: TaskStream,
    pub graphs: TaskGraphs,
}

impl StreamContext {
    pub fn new(stream: &TaskStream) -> Result<Self> {
        if stream.is_empty() {
            return Err(Error::EmptyDataset("task stream has no tasks".into()));
        }
        let stream = stream.augmented()?;
        let graphs = TaskGraphs::new(&stream)?;
        Ok(Self { stream, graphs })
    }

    fn train_facts(&self, t: usize) -> &[Quadruple] {
        &self.stream.tasks[t].train
    }

    fn history_snapshots(&self, t: usize) -> Vec<Snapshot> {
        (0..t).map(|i| self.stream.train_snapshot(i)).collect()
    }
}

pub struct RunResult {
    pub outcomes: Vec<TaskOutcome>,
    pub stats: RunStats,
}

/// Trains every task in order.
pub fn train_stream(stream: &TaskStream, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<RunResult> {
    cfg.validate()?;
    let ctx = StreamContext::new(stream)?;
    let mut state = StreamState::new(cfg);
    let mut outcomes = Vec::with_capacity(ctx.stream.len());
    for t in 0..ctx.stream.len() {
        let outcome = train_task(cfg, &ctx, t, &mut state, observer)?;
        outcomes.push(outcome);
    }
    Ok(RunResult {
        outcomes,
        stats: state.stats,
    })
}

fn dm_config(cfg: &TrainConfig) -> DmTrainConfig {
    DmTrainConfig {
        epochs: cfg.dm_epochs,
        batch_size: cfg.dm_batch,
        lr: cfg.dm_lr,
        ce_weight: cfg.dm_ce_weight,
        subject_weight: cfg.dm_subject_weight,
    }
}

fn uses_generation(cfg: &TrainConfig) -> bool {
    cfg.method == Method::Dgar && !cfg.ablations.no_gr
}

/// Prompts for every distinct subject of task `t`'s training facts.
pub fn build_replay_set(cfg: &TrainConfig, ctx: &StreamContext, t: usize) -> Result<ReplaySet> {
    if t == 0 {
        return Ok(ReplaySet::default());
    }
    let history = ctx.history_snapshots(t);
    let index = HistoryIndex::new(&history, ctx.stream.vocab.num_relations, t)?;
    let subjects: Vec<usize> = ctx
        .train_facts(t)
        .iter()
        .map(|q| q.subject)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sets = par::try_map(cfg.parallelism, &subjects, |&e| {
        let mut r = rng::stream(cfg.seed, &[tag::PROMPT, t as u64, e as u64]);
        sample_prompts(e, cfg.k, &index, &mut r)
    })?;
    let prompts: Vec<HistoricalContextPrompt> = sets.into_iter().flat_map(|s| s.prompts).collect();
    let entities = collect_replay_entities(&prompts);
    let set = ReplaySet { prompts, entities };
    if !cfg.ablations.no_hp {
        return Ok(set);
    }
    // Same number of facts, drawn uniformly from the whole history.
    let pool: Vec<Quadruple> = history.iter().flat_map(|s| s.facts().iter().copied()).collect();
    let m = set.num_facts().min(pool.len());
    let mut r = rng::stream(cfg.seed, &[tag::ABLATION_HP, t as u64]);
    let mut grouped: BTreeMap<(usize, usize), Vec<(usize, usize, usize)>> = BTreeMap::new();
    for i in rand::seq::index::sample(&mut r, pool.len(), m) {
        let q = pool[i];
        grouped.entry((q.object, q.timestamp)).or_default().push(q.triple());
    }
    let prompts: Vec<HistoricalContextPrompt> = grouped
        .into_iter()
        .map(|((entity, time), mut triples)| {
            triples.sort_unstable();
            HistoricalContextPrompt { entity, time, triples }
        })
        .collect();
    let entities = collect_replay_entities(&prompts);
    Ok(ReplaySet { prompts, entities })
}

/// Replay facts grouped by time, each scored on its own history.
fn replay_terms<'g>(ctx: &'g StreamContext, cfg: &TrainConfig, facts: &[Quadruple]) -> Vec<ReplayTerm<'g>> {
    let mut by_time: BTreeMap<usize, Vec<Quadruple>> = BTreeMap::new();
    for q in facts {
        by_time.entry(q.timestamp).or_default().push(*q);
    }
    by_time
        .into_iter()
        .map(|(time, facts)| ReplayTerm {
            history: ctx.graphs.history(time, cfg.window),
            batch: QueryBatch::from_facts(&facts),
        })
        .collect()
}

/// Runs guided generation for every prompt triple and pools the results
/// per entity.
pub fn generate_replay(
    cfg: &TrainConfig,
    ctx: &StreamContext,
    t: usize,
    previous: &ReasonerParams,
    dm: &DiffusionModel,
    replay: &ReplaySet,
) -> Result<(ReplayInjection, usize)> {
    let times: Vec<usize> = replay
        .prompts
        .iter()
        .map(|p| p.time)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let states = par::try_map(cfg.parallelism, &times, |&i| {
        evolve(previous, &ctx.graphs.history(i, cfg.window), None).map(|s| s.final_state)
    })?;
    let scorers = states
        .iter()
        .map(|h| DecoderScorer::new(previous.clone(), h.clone(), cfg.temperature))
        .collect::<Result<Vec<_>>>()?;
    let contexts: Vec<GenerationContext<'_>> = states
        .iter()
        .zip(&scorers)
        .map(|(h, s)| GenerationContext {
            entity: h,
            relation: &previous.relation,
            scorer: Some(s),
        })
        .collect();
    let context_of: BTreeMap<usize, usize> = times.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let mut jobs = Vec::with_capacity(replay.num_facts());
    let mut job_times = Vec::with_capacity(replay.num_facts());
    for p in &replay.prompts {
        for &(s, r, e) in &p.triples {
            let seed = rng::derive_seed(cfg.seed, &[tag::NOISE, t as u64, jobs.len() as u64]);
            jobs.push(GenerationJob {
                subject: s,
                relation: r,
                target: e,
                context: context_of[&p.time],
                seed,
            });
            job_times.push(p.time);
        }
    }
    let opts = ReverseOptions {
        guidance: cfg.effective_gamma(),
        parallelism: cfg.parallelism,
        batch: cfg.gen_batch,
    };
    let outputs = generate(dm, &contexts, &jobs, &opts)?;
    let mut per_entity: BTreeMap<usize, BTreeMap<usize, Vec<Vec<f64>>>> = BTreeMap::new();
    for ((job, time), out) in jobs.iter().zip(&job_times).zip(outputs) {
        per_entity
            .entry(job.target)
            .or_default()
            .entry(*time)
            .or_default()
            .push(out.target);
        per_entity
            .entry(job.subject)
            .or_default()
            .entry(*time)
            .or_default()
            .push(out.neighbor);
    }
    let grouped: BTreeMap<usize, Vec<Vec<Vec<f64>>>> = per_entity
        .into_iter()
        .map(|(e, slices)| (e, slices.into_values().collect()))
        .collect();
    let pooled = aggregate_replay(&grouped)?;
    Ok((ReplayInjection::new(&pooled, previous.dim())?, 2 * jobs.len()))
}

/// Counts hook invocations.
struct CountingHook<'a> {
    inner: DarHook<'a>,
    calls: Cell<usize>,
}

impl LayerHook for CountingHook<'_> {
    fn apply(&self, tape: &mut Tape, bound: &BoundReasoner, layer: usize, h: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        self.calls.set(self.calls.get() + 1);
        self.inner.apply(tape, bound, layer, h)
    }
}

fn valid_mrr(params: &ReasonerParams, ctx: &StreamContext, cfg: &TrainConfig, t: usize) -> Result<Option<f64>> {
    let facts = &ctx.stream.tasks[t].valid;
    if facts.is_empty() {
        return Ok(None);
    }
    let stack = evolve(params, &ctx.graphs.history(t, cfg.window), None)?;
    Ok(Some(mrr(&rank_facts(params, &stack.final_state, facts, None)?)?))
}

/// Final entity states of `params` for scoring task `t`.
pub fn task_states(params: &ReasonerParams, ctx: &StreamContext, cfg: &TrainConfig, t: usize) -> Result<Matrix> {
    Ok(evolve(params, &ctx.graphs.history(t, cfg.window), None)?.final_state)
}

/// Trains task `t` from `state`, updating it in place.
pub fn train_task(
    cfg: &TrainConfig,
    ctx: &StreamContext,
    t: usize,
    state: &mut StreamState,
    observer: &mut dyn TrainObserver,
) -> Result<TaskOutcome> {
    let vocab = ctx.stream.vocab;
    let previous = match (&state.params, t) {
        (None, 0) => None,
        (Some(p), _) if t > 0 => Some(p.clone()),
        (None, _) => {
            return Err(Error::StreamContinuity(format!(
                "task {t} needs the parameters of task {}",
                t - 1
            )))
        }
        (Some(_), _) => return Err(Error::StreamContinuity("task 0 must start from fresh parameters".into())),
    };
    let mut params = match &previous {
        Some(p) => p.clone(),
        None => ReasonerParams::init(vocab, cfg.dim, cfg.layers, &mut rng::stream(cfg.seed, &[tag::INIT, 0])),
    };
    if let Some(p) = &previous {
        if p.tensors() != params.tensors() {
            return Err(Error::StreamContinuity(format!("task {t} does not start from task {}", t - 1)));
        }
    }
    observer.task_start(t, previous.as_ref(), &params);

    let current_facts = ctx.train_facts(t);
    let mut replay_set = ReplaySet::default();
    let mut replay_facts: Vec<Quadruple> = Vec::new();
    let mut injection: Option<ReplayInjection> = None;
    let mut combine = Combine::Regularizer { mu: 0.0 };

    match cfg.method {
        Method::Ft => {}
        Method::Dgar => {
            replay_set = build_replay_set(cfg, ctx, t)?;
            replay_facts = replay_set.facts().into_iter().collect::<BTreeSet<_>>().into_iter().collect();
            combine = Combine::Regularizer { mu: cfg.effective_mu() };
            if uses_generation(cfg) && !replay_set.is_empty() {
                let prev = previous.as_ref().expect("replay only after the first task");
                let dm = state
                    .diffusion
                    .as_ref()
                    .ok_or_else(|| Error::StreamContinuity(format!("task {t} needs the diffusion model")))?;
                let (inj, n) = generate_replay(cfg, ctx, t, prev, dm, &replay_set)?;
                state.stats.generation_calls += 1;
                state.stats.generated_vectors += n;
                injection = Some(inj);
            }
        }
        Method::Er => {
            if t > 0 {
                let budget = build_replay_set(cfg, ctx, t)?.num_facts();
                let mut r = rng::stream(cfg.seed, &[tag::ER, t as u64]);
                replay_facts = state.buffer.sample(budget, &mut r);
                replay_facts.sort_unstable();
            }
            combine = Combine::Union;
        }
    }

    let mode = if cfg.ablations.no_ar {
        BalanceMode::DirectSum
    } else {
        BalanceMode::Learned
    };
    let hook = injection.as_ref().map(|replay| CountingHook {
        inner: DarHook { replay, mode },
        calls: Cell::new(0),
    });
    let inputs = LossInputs {
        history: ctx.graphs.history(t, cfg.window),
        current: QueryBatch::from_facts(current_facts),
        replay: replay_terms(ctx, cfg, &replay_facts),
        hook: hook.as_ref().map(|h| h as &dyn LayerHook),
        combine,
    };

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ReasonerParams)> = None;
    let mut since_best = 0usize;
    if !inputs.current.is_empty() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            params.tensors().into_iter().map(|(_, m)| m),
        );
        for epoch in 0..cfg.epochs {
            let (value, grads) = loss_and_gradients(&params, &inputs)?;
            adam.step(&mut params.tensors_mut(), &grads)?;
            let valid = valid_mrr(&params, ctx, cfg, t)?;
            epochs.push(EpochLog {
                total: value.total,
                current: value.current,
                replay: value.replay,
                valid_mrr: valid,
            });
            if let Some(v) = valid {
                if best.as_ref().is_none_or(|b| v > b.0) {
                    best = Some((v, epoch, params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience.max(1) {
                        break;
                    }
                }
            }
        }
    } else {
        log::warn!("task {t} has no training facts; parameters carried over");
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        params = p;
    }
    if let Some(h) = &hook {
        state.stats.hook_calls += h.calls.get();
    }

    // Diffusion model: pretrain after the first task, then continual updates.
    let mut dm_losses = Vec::new();
    if uses_generation(cfg) {
        let facts = TaggedFacts {
            split: Split::Train,
            facts: current_facts.to_vec(),
        };
        let states = task_states(&params, ctx, cfg, t)?;
        let emb = Embeddings {
            entity: &states,
            relation: &params.relation,
        };
        let seed = rng::derive_seed(cfg.seed, &[tag::DM_TRAIN, t as u64]);
        let (dm, losses) = match (&state.diffusion, &previous) {
            (Some(prev_dm), Some(prev)) => {
                let prev_states = task_states(prev, ctx, cfg, t)?;
                let alpha = params.alphas().last().copied().unwrap_or(0.5);
                let balance = (!replay_set.entities.is_empty()).then_some(ReplayBalance {
                    previous: &prev_states,
                    alpha,
                    entities: &replay_set.entities,
                });
                continual_update_dm(prev_dm, &facts, emb, balance, &dm_config(cfg), seed)?
            }
            _ => {
                let schedule = NoiseSchedule::linear(cfg.dm_steps, cfg.beta_start, cfg.beta_end)?;
                let init = DiffusionModel::init(
                    cfg.dim,
                    schedule,
                    cfg.dm_layers,
                    &mut rng::stream(cfg.seed, &[tag::INIT, 1]),
                );
                pretrain(&init, &facts, emb, &dm_config(cfg), seed)?
            }
        };
        state.stats.dm_updates += 1;
        state.diffusion = Some(dm);
        dm_losses = losses;
    }

    if cfg.method == Method::Er {
        state.buffer.extend(current_facts.iter().copied());
    }

    state.params = Some(params.clone());
    let outcome = TaskOutcome {
        task: t,
        alphas: params.alphas(),
        params,
        diffusion: state.diffusion.clone(),
        epochs,
        best_epoch,
        replay_entities: replay_set.entities.len(),
        replay_facts: replay_facts.len(),
        dm_losses,
    };
    observer.task_end(&outcome)?;
    Ok(outcome)
}
