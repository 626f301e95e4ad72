//! Conditional denoising diffusion over entity representations.
//!
//! A fact `(s, r, o)` becomes the token sequence `[S_0, R_0, X_n]` where
//! `X_n` is the object's representation noised to step `n`. The denoiser
//! predicts the clean `X_0`; reverse sampling starts from pure noise and can
//! be steered by the gradient of a scorer's probability for the target.

mod denoiser;
mod generate;
mod guidance;
mod schedule;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use denoiser::{
    denoise, denoise_on_tape, stack_tokens, BoundDenoiser, DenoiserParams, EncoderLayer, SLOT_RELATION,
    SLOT_SUBJECT, SLOT_TARGET, TOKENS,
};
pub use generate::{
    aggregate_replay, denoise_step, generate, trajectory, Generated, GenerationContext, GenerationJob,
    ReverseOptions, StepOutput,
};
pub use guidance::{guidance_step, DecoderScorer, GuidanceScorer};
pub use schedule::{forward_noise, forward_noise_with, standard_normal, NoiseSchedule};
pub use train::{
    balanced_table, continual_update_dm, pretrain, reconstruction_error, train_denoiser, DmTrainConfig,
    Embeddings, ReplayBalance,
};

/// Diffusion state φ: schedule plus denoiser weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserParams,
}

impl DiffusionModel {
    pub fn init<R: Rng + ?Sized>(dim: usize, schedule: NoiseSchedule, layers: usize, rng: &mut R) -> Self {
        let denoiser = DenoiserParams::init(dim, schedule.steps(), layers, rng);
        Self { schedule, denoiser }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        self.denoiser.validate()?;
        if self.denoiser.steps() != self.schedule.steps() {
            return Err(crate::error::Error::Contract(format!(
                "timestep table has {} rows for a {}-step schedule",
                self.denoiser.steps(),
                self.schedule.steps()
            )));
        }
        Ok(())
    }
}
