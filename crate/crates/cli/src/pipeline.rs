//! Shared fixtures for the experiments: schedule, frozen encoder, template
//! bank, checkpoint loading, prompt cycling and per-run seed derivation.

use std::path::PathBuf;

use lab_core::denoiser::DenoiserModel;
use lab_core::engine::{sample_trajectory, GuidanceMode, GuidancePolicy, Trajectory};
use lab_core::prompt::{build_promptset, PromptEncoder, PromptSpec, TokenSequence};
use lab_core::probes::CannyParams;
use lab_core::prompt::render::template_bank;
use lab_core::{rng, LatentGrid, NoiseSchedule};

use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

/// Everything an experiment needs besides the model.
pub struct Bench {
    pub config: ExperimentConfig,
    pub sched: NoiseSchedule,
    pub encoder: PromptEncoder,
    pub null: TokenSequence,
    pub bank: Vec<(PromptSpec, LatentGrid)>,
}

impl Bench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let sched = NoiseSchedule::build(config.t_train, config.beta_min, config.beta_max, config.ddim_steps)
            .map_err(|e| LabError::usage(format!("schedule: {e}")))?;
        let encoder = PromptEncoder::new(config.token_dim, config.token_len, config.encoder_seed)
            .map_err(|e| LabError::data(format!("encoder: {e}")))?;
        let null = encoder.null_condition();
        let bank = template_bank(config.image_size, config.image_size);
        Ok(Self {
            config,
            sched,
            encoder,
            null,
            bank,
        })
    }

    /// Loads the trained checkpoint named by the config.
    pub fn load_model(&self) -> Result<DenoiserModel> {
        let path: PathBuf = self
            .config
            .checkpoint
            .clone()
            .ok_or_else(|| LabError::dependency("config has no `checkpoint`; produce one with the `train` step"))?;
        let model = load_checkpoint(&path)?;
        let h = model.hyper();
        if h.m != self.config.image_size || h.token_len != self.config.token_len || h.token_dim != self.config.token_dim
        {
            return Err(LabError::data(format!(
                "checkpoint dims ({}x{}, L={}) do not match the config ({}, L={})",
                h.m, h.n, h.token_len, self.config.image_size, self.config.token_len
            )));
        }
        Ok(model)
    }

    pub fn canny(&self) -> CannyParams {
        CannyParams {
            sigma: self.config.canny_sigma,
            t_low: self.config.canny_low,
            t_high: self.config.canny_high,
        }
    }

    /// Deterministic prompt assignment for `n` runs: the seeded balanced
    /// prompt set, cycled when `n` exceeds the vocabulary.
    pub fn prompts_for_runs(&self, n: usize) -> Result<Vec<PromptSpec>> {
        let base = build_promptset(
            lab_core::prompt::N_PROMPTS.min(n.max(1)),
            self.config.seed,
        )
        .map_err(|e| LabError::data(e.to_string()))?;
        Ok((0..n).map(|i| base[i % base.len()]).collect())
    }

    /// Prompt pairs with distinct nouns for switching experiments.
    pub fn prompt_pairs(&self, n: usize) -> Result<Vec<(PromptSpec, PromptSpec)>> {
        let base = build_promptset(lab_core::prompt::N_PROMPTS, self.config.seed)
            .map_err(|e| LabError::data(e.to_string()))?;
        let mut pairs = Vec::with_capacity(n);
        let mut i = 0usize;
        let mut offset = 1usize;
        while pairs.len() < n {
            let a = base[i % base.len()];
            let mut b = base[(i + offset) % base.len()];
            while b.noun_id == a.noun_id {
                offset += 1;
                b = base[(i + offset) % base.len()];
            }
            pairs.push((a, b));
            i += 1;
            if i % base.len() == 0 {
                offset += 1;
            }
        }
        Ok(pairs)
    }

    /// Seed for run `index`, derived so runs are order-independent.
    pub fn run_seed(&self, index: u64) -> u64 {
        rng::mix(self.config.seed, index)
    }

    pub fn policy(&self, mode: GuidanceMode, a: usize) -> GuidancePolicy {
        GuidancePolicy {
            w: self.config.w,
            drop_start: a,
            mode,
        }
    }

    /// One sampling run against the shared null condition.
    pub fn sample(
        &self,
        model: &DenoiserModel,
        policy: &GuidancePolicy,
        cond: &TokenSequence,
        cond2: Option<&TokenSequence>,
        seed: u64,
    ) -> Result<Trajectory> {
        sample_trajectory(model, &self.sched, policy, cond, cond2, &self.null, seed)
            .map_err(|e| LabError::data(format!("sampling: {e}")))
    }
}

pub fn parse_mode(name: &str) -> Result<GuidanceMode> {
    match name {
        "full" => Ok(GuidanceMode::Full),
        "drop-late" => Ok(GuidanceMode::DropLate),
        "drop-early" => Ok(GuidanceMode::DropEarly),
        "switch" => Ok(GuidanceMode::Switch),
        other => Err(LabError::usage(format!("unknown mode '{other}'"))),
    }
}
