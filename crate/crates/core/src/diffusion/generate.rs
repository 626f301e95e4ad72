use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::rng;
use crate::tensor::Matrix;

use super::denoiser::{denoise, stack_tokens, SLOT_SUBJECT, SLOT_TARGET, TOKENS};
use super::guidance::{guidance_step, GuidanceScorer};
use super::schedule::standard_normal;
use super::DiffusionModel;

/// Embedding tables a generation job is conditioned on, plus the scorer
/// steering it.
#[derive(Clone, Copy)]
pub struct GenerationContext<'a> {
    pub entity: &'a Matrix,
    pub relation: &'a Matrix,
    pub scorer: Option<&'a dyn GuidanceScorer>,
}

/// One reverse chain for the prompt fact `(subject, relation, target)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationJob {
    pub subject: usize,
    pub relation: usize,
    pub target: usize,
    /// Index into the context list.
    pub context: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// `X_0`, the generated target representation.
    pub target: Vec<f64>,
    /// The subject slot re-projected at the last step.
    pub neighbor: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReverseOptions {
    /// Guidance strength `γ`; exactly zero disables the scorer.
    pub guidance: f64,
    pub parallelism: Parallelism,
    /// Chains denoised together per forward pass.
    pub batch: usize,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            parallelism: Parallelism::default(),
            batch: 64,
        }
    }
}

/// One reverse step output.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub previous: Vec<f64>,
    pub clean_estimate: Vec<f64>,
    pub neighbor: Vec<f64>,
}

/// Ancestral step `X_n → X_{n-1}` for the tokens `(subject, relation, x_n)`.
/// `noise` is ignored at `n = 1`; at other steps `None` means zero noise.
pub fn denoise_step(
    model: &DiffusionModel,
    subject: &[f64],
    relation: &[f64],
    x_n: &[f64],
    n: usize,
    noise: Option<&[f64]>,
) -> Result<StepOutput> {
    model.schedule.check_step(n)?;
    let d = model.denoiser.dim();
    if subject.len() != d || relation.len() != d || x_n.len() != d {
        return Err(Error::Contract(format!("token width must be {d}")));
    }
    let out = denoise(&model.denoiser, &stack_tokens(&[(subject, relation, x_n)], d), &[n]);
    let x0 = out.row(SLOT_TARGET).to_vec();
    let previous = posterior_sample(model, &x0, x_n, n, noise);
    Ok(StepOutput {
        previous,
        clean_estimate: x0,
        neighbor: out.row(SLOT_SUBJECT).to_vec(),
    })
}

fn posterior_sample(model: &DiffusionModel, x0: &[f64], x_n: &[f64], n: usize, noise: Option<&[f64]>) -> Vec<f64> {
    let (a, b) = model.schedule.posterior_mean_coefs(n);
    let mut out: Vec<f64> = x0.iter().zip(x_n).map(|(p, x)| a * p + b * x).collect();
    if n > 1 {
        if let Some(eps) = noise {
            let sd = model.schedule.posterior_variance(n).sqrt();
            for (o, e) in out.iter_mut().zip(eps) {
                *o += sd * e;
            }
        }
    }
    out
}

fn check_jobs(model: &DiffusionModel, contexts: &[GenerationContext<'_>], jobs: &[GenerationJob]) -> Result<()> {
    let d = model.denoiser.dim();
    for ctx in contexts {
        if ctx.entity.cols() != d || ctx.relation.cols() != d {
            return Err(Error::Contract(format!("conditioning tables must be {d} wide")));
        }
    }
    for j in jobs {
        let ctx = contexts
            .get(j.context)
            .ok_or_else(|| Error::Contract(format!("job refers to missing context {}", j.context)))?;
        if j.subject >= ctx.entity.rows() || j.target >= ctx.entity.rows() || j.relation >= ctx.relation.rows() {
            return Err(Error::Domain(format!(
                "prompt fact ({}, {}, {}) outside conditioning tables",
                j.subject, j.relation, j.target
            )));
        }
    }
    Ok(())
}

/// Runs the reverse chains of `jobs` chunk by chunk. With `record`, the
/// full trajectory `X_N, ..., X_0` of every chain is returned too.
fn run_chunk(
    model: &DiffusionModel,
    contexts: &[GenerationContext<'_>],
    jobs: &[GenerationJob],
    guidance: f64,
    record: bool,
) -> Result<(Vec<Generated>, Vec<Vec<Vec<f64>>>)> {
    let d = model.denoiser.dim();
    let steps = model.schedule.steps();
    let mut rngs: Vec<_> = jobs.iter().map(|j| rng::stream(j.seed, &[])).collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| standard_normal(d, r)).collect();
    let mut traj: Vec<Vec<Vec<f64>>> = if record {
        xs.iter().map(|x| vec![x.clone()]).collect()
    } else {
        Vec::new()
    };
    let conds: Vec<(&[f64], &[f64])> = jobs
        .iter()
        .map(|j| {
            let ctx = &contexts[j.context];
            (ctx.entity.row(j.subject), ctx.relation.row(j.relation))
        })
        .collect();
    let mut neighbors = vec![Vec::new(); jobs.len()];
    for n in (1..=steps).rev() {
        let triples: Vec<_> = conds.iter().zip(&xs).map(|(&(s, r), x)| (s, r, x.as_slice())).collect();
        let out = denoise(&model.denoiser, &stack_tokens(&triples, d), &vec![n; jobs.len()]);
        for (b, job) in jobs.iter().enumerate() {
            let x0 = out.row(TOKENS * b + SLOT_TARGET);
            let noise = (n > 1).then(|| standard_normal(d, &mut rngs[b]));
            let mut next = posterior_sample(model, x0, &xs[b], n, noise.as_deref());
            if guidance != 0.0 {
                if let Some(scorer) = contexts[job.context].scorer {
                    let step = guidance_step(scorer, (job.subject, job.relation, job.target), &next, guidance)?;
                    for (x, g) in next.iter_mut().zip(step) {
                        *x += g;
                    }
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("reverse chain diverged at step {n}")));
            }
            if n == 1 {
                neighbors[b] = out.row(TOKENS * b + SLOT_SUBJECT).to_vec();
            }
            if record {
                traj[b].push(next.clone());
            }
            xs[b] = next;
        }
    }
    let generated = xs
        .into_iter()
        .zip(neighbors)
        .map(|(target, neighbor)| Generated { target, neighbor })
        .collect();
    Ok((generated, traj))
}

/// Generates one target representation per job, in job order. Each chain's
/// randomness comes only from its own seed, so the result does not depend on
/// batching or thread scheduling.
pub fn generate(
    model: &DiffusionModel,
    contexts: &[GenerationContext<'_>],
    jobs: &[GenerationJob],
    opts: &ReverseOptions,
) -> Result<Vec<Generated>> {
    check_jobs(model, contexts, jobs)?;
    if !opts.guidance.is_finite() {
        return Err(Error::Domain("guidance strength must be finite".into()));
    }
    let chunks: Vec<&[GenerationJob]> = jobs.chunks(opts.batch.max(1)).collect();
    let parts = par::try_map(opts.parallelism, &chunks, |chunk| {
        run_chunk(model, contexts, chunk, opts.guidance, false).map(|(g, _)| g)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Full trajectory `X_N, ..., X_0` of a single chain.
pub fn trajectory(
    model: &DiffusionModel,
    context: GenerationContext<'_>,
    job: GenerationJob,
    guidance: f64,
) -> Result<Vec<Vec<f64>>> {
    let contexts = [context];
    let job = GenerationJob { context: 0, ..job };
    check_jobs(model, &contexts, &[job])?;
    let (_, mut traj) = run_chunk(model, &contexts, &[job], guidance, true)?;
    Ok(traj.pop().unwrap_or_default())
}

/// Mean of every generated vector of each entity, pooled over time slices.
pub fn aggregate_replay(generated: &BTreeMap<usize, Vec<Vec<Vec<f64>>>>) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (&e, slices) in generated {
        let mut count = 0usize;
        let mut acc: Vec<f64> = Vec::new();
        for v in slices.iter().flatten() {
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            } else if acc.len() != v.len() {
                return Err(Error::Contract(format!("ragged generated vectors for entity {e}")));
            }
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(format!("entity {e} has no generated vectors")));
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        out.insert(e, acc);
    }
    Ok(out)
}
