//! Forward noising, DDIM reverse stepping, classifier-free guidance, the
//! staged (guidance-dropping) predictor, trajectory recording, and
//! model-evaluation accounting.
//!
//! Sampled-step ranks run from `S` (the first, noisiest prediction of a run)
//! down to 1 (the last). The drop boundary `a` of a policy counts ranks:
//! `DropLate` runs full guidance on ranks above `a` and goes unconditional on
//! the final `a` steps, so a full run spends exactly `2S - a` forward passes.

use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::grid::{GridError, LatentGrid};
use crate::prompt::TokenSequence;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineError {
    Grid(GridError),
    TimestepOutOfRange { t: usize, t_train: usize },
    StepOrdering { t: usize, t_prev: usize },
    RankOutOfRange { rank: usize, s: usize },
    DropBoundaryOutOfRange { a: usize, s: usize },
    NegativeGuidanceScale,
    /// SWITCH mode needs a second condition; other modes must not get one.
    SecondConditionMismatch,
    /// Eval accounting against an empty baseline.
    EmptyBaseline,
    TokenLengthMismatch { expected: usize, got: usize },
    /// A partial K/V substitution arrived without its untouched companion.
    MissingKvCompanion,
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::Grid(e) => write!(f, "{e}"),
            EngineError::TimestepOutOfRange { t, t_train } => {
                write!(f, "timestep {t} outside 0..={t_train}")
            }
            EngineError::StepOrdering { t, t_prev } => {
                write!(f, "step target {t_prev} must not exceed source {t}")
            }
            EngineError::RankOutOfRange { rank, s } => write!(f, "step rank {rank} outside 1..={s}"),
            EngineError::DropBoundaryOutOfRange { a, s } => {
                write!(f, "drop boundary {a} outside 0..={s}")
            }
            EngineError::NegativeGuidanceScale => write!(f, "guidance scale must be >= 0"),
            EngineError::SecondConditionMismatch => {
                write!(f, "second condition must be supplied exactly for SWITCH mode")
            }
            EngineError::EmptyBaseline => write!(f, "baseline trajectory executed no forward passes"),
            EngineError::TokenLengthMismatch { expected, got } => {
                write!(f, "token sequence length {got}, model expects {expected}")
            }
            EngineError::MissingKvCompanion => {
                write!(f, "partial K/V substitution needs the untouched companion sequence")
            }
        }
    }
}

impl core::error::Error for EngineError {}

impl From<GridError> for EngineError {
    fn from(e: GridError) -> Self {
        EngineError::Grid(e)
    }
}

/// Per-pixel attention weights over the conditioning tokens; rows are
/// distributions (nonnegative, summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pixels: usize,
    tokens: usize,
    weights: Vec<f64>, // pixel-major
}

impl AttentionMap {
    pub fn from_rows(pixels: usize, tokens: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), pixels * tokens);
        Self {
            pixels,
            tokens,
            weights,
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.weights[pixel * self.tokens..(pixel + 1) * self.tokens]
    }

    /// One token's weights over all pixels.
    pub fn token_column(&self, token: usize) -> Vec<f64> {
        (0..self.pixels)
            .map(|p| self.weights[p * self.tokens + token])
            .collect()
    }
}

/// Output of one denoiser forward pass.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: LatentGrid,
    /// One map per cross-attention block.
    pub attention: Vec<AttentionMap>,
}

/// A conditional noise predictor usable by the sampling loop.
pub trait Denoiser {
    /// Shape of the latents the model operates on.
    fn latent_shape(&self) -> (usize, usize, usize);

    /// One forward pass at training timestep `t`.
    fn predict(&self, t: usize, x: &LatentGrid, tokens: &TokenSequence) -> Result<DenoiserOutput, EngineError>;
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`, elementwise.
pub fn forward_noise(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid, EngineError> {
    if t > sched.t_train() {
        return Err(EngineError::TimestepOutOfRange {
            t,
            t_train: sched.t_train(),
        });
    }
    Ok(x0.affine_combine(sched.sqrt_alpha_bar(t), eps, sched.sqrt_one_minus_alpha_bar(t))?)
}

/// Deterministic DDIM update from timestep `t` to `t_prev`:
/// reconstruct `x0_hat = (x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)` and
/// re-noise it at `t_prev`. Linear in `(x_t, eps_hat)`.
pub fn ddim_step(
    x_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    eps_hat: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid, EngineError> {
    if t > sched.t_train() || t_prev > sched.t_train() {
        return Err(EngineError::TimestepOutOfRange {
            t: t.max(t_prev),
            t_train: sched.t_train(),
        });
    }
    if t_prev > t {
        return Err(EngineError::StepOrdering { t, t_prev });
    }
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let a_t = sched.alpha_bar(t);
    let a_prev = sched.alpha_bar(t_prev);
    // x_prev = sqrt(a_prev/a_t) x_t + (sqrt(1-a_prev) - sqrt(a_prev(1-a_t)/a_t)) eps_hat
    let x_coeff = (a_prev / a_t).sqrt();
    let eps_coeff = (1.0 - a_prev).sqrt() - (a_prev * (1.0 - a_t) / a_t).sqrt();
    Ok(x_t.affine_combine(x_coeff, eps_hat, eps_coeff)?)
}

/// When the conditional branch is dropped or switched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Full guidance at every step.
    Full,
    /// Guidance on ranks above `a`; pure unconditional on the last `a` steps.
    DropLate,
    /// Mirrored: unconditional on the first `S - a` steps, guidance on the
    /// final `a` (so `a = S` reproduces the standard full run).
    DropEarly,
    /// Full guidance throughout, with the primary condition on ranks above
    /// `a` and the secondary condition on the rest.
    Switch,
}

/// Guidance scale, drop boundary and window mode for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidancePolicy {
    /// Guidance scale `w >= 0`.
    pub w: f64,
    /// Drop boundary in sampled-step ranks, `0..=S`.
    pub drop_start: usize,
    pub mode: GuidanceMode,
}

impl GuidancePolicy {
    pub fn full(w: f64) -> Self {
        Self {
            w,
            drop_start: 0,
            mode: GuidanceMode::Full,
        }
    }

    pub fn drop_late(w: f64, a: usize) -> Self {
        Self {
            w,
            drop_start: a,
            mode: GuidanceMode::DropLate,
        }
    }

    pub fn drop_early(w: f64, a: usize) -> Self {
        Self {
            w,
            drop_start: a,
            mode: GuidanceMode::DropEarly,
        }
    }

    pub fn switch(w: f64, a: usize) -> Self {
        Self {
            w,
            drop_start: a,
            mode: GuidanceMode::Switch,
        }
    }

    fn validate(&self, s: usize) -> Result<(), EngineError> {
        if self.w < 0.0 || !self.w.is_finite() {
            return Err(EngineError::NegativeGuidanceScale);
        }
        if self.drop_start > s {
            return Err(EngineError::DropBoundaryOutOfRange {
                a: self.drop_start,
                s,
            });
        }
        Ok(())
    }
}

/// Result of one guided prediction with its cost accounting.
#[derive(Debug, Clone)]
pub struct GuidedPrediction {
    pub eps: LatentGrid,
    pub eps_cond: Option<LatentGrid>,
    pub eps_uncond: Option<LatentGrid>,
    /// Attention maps of the pass that used the active condition (the
    /// unconditional pass when guidance was dropped).
    pub attention: Vec<AttentionMap>,
    pub cond_evals: u32,
    pub uncond_evals: u32,
}

/// Classifier-free guidance: `eps(null) + w * (eps(cond) - eps(null))`.
///
/// Performs exactly one unconditional and one conditional forward pass,
/// except at `w = 0` where the conditional pass is skipped so that the
/// accounting reflects work actually done.
pub fn cfg_predict<D: Denoiser>(
    model: &D,
    t: usize,
    x: &LatentGrid,
    cond: &TokenSequence,
    null: &TokenSequence,
    w: f64,
) -> Result<GuidedPrediction, EngineError> {
    if w < 0.0 || !w.is_finite() {
        return Err(EngineError::NegativeGuidanceScale);
    }
    let uncond = model.predict(t, x, null)?;
    if w == 0.0 {
        return Ok(GuidedPrediction {
            eps: uncond.eps.clone(),
            eps_cond: None,
            eps_uncond: Some(uncond.eps),
            attention: uncond.attention,
            cond_evals: 0,
            uncond_evals: 1,
        });
    }
    let cond_out = model.predict(t, x, cond)?;
    let gap = cond_out.eps.sub(&uncond.eps)?;
    let eps = uncond.eps.affine_combine(1.0, &gap, w)?;
    Ok(GuidedPrediction {
        eps,
        eps_cond: Some(cond_out.eps),
        eps_uncond: Some(uncond.eps),
        attention: cond_out.attention,
        cond_evals: 1,
        uncond_evals: 1,
    })
}

fn uncond_only<D: Denoiser>(
    model: &D,
    t: usize,
    x: &LatentGrid,
    null: &TokenSequence,
) -> Result<GuidedPrediction, EngineError> {
    let out = model.predict(t, x, null)?;
    Ok(GuidedPrediction {
        eps: out.eps.clone(),
        eps_cond: None,
        eps_uncond: Some(out.eps),
        attention: out.attention,
        cond_evals: 0,
        uncond_evals: 1,
    })
}

/// Staged prediction: applies the policy's window at sampled-step rank
/// `t_rank` (in `1..=S`).
pub fn staged_predict<D: Denoiser>(
    model: &D,
    t_rank: usize,
    x: &LatentGrid,
    cond: &TokenSequence,
    cond2: Option<&TokenSequence>,
    null: &TokenSequence,
    policy: &GuidancePolicy,
    sched: &NoiseSchedule,
) -> Result<GuidedPrediction, EngineError> {
    let s = sched.num_sampled_steps();
    policy.validate(s)?;
    if t_rank == 0 || t_rank > s {
        return Err(EngineError::RankOutOfRange { rank: t_rank, s });
    }
    if (policy.mode == GuidanceMode::Switch) != cond2.is_some() {
        return Err(EngineError::SecondConditionMismatch);
    }
    let t = sched.timestep_at_rank(t_rank);
    let a = policy.drop_start;
    match policy.mode {
        GuidanceMode::Full => cfg_predict(model, t, x, cond, null, policy.w),
        GuidanceMode::DropLate => {
            if t_rank > a {
                cfg_predict(model, t, x, cond, null, policy.w)
            } else {
                uncond_only(model, t, x, null)
            }
        }
        GuidanceMode::DropEarly => {
            if t_rank <= a {
                cfg_predict(model, t, x, cond, null, policy.w)
            } else {
                uncond_only(model, t, x, null)
            }
        }
        GuidanceMode::Switch => {
            let active = if t_rank > a { cond } else { cond2.expect("checked above") };
            cfg_predict(model, t, x, active, null, policy.w)
        }
    }
}

/// One record per state of a sampling run.
///
/// `step_rank` counts the steps still to execute for the stored latent:
/// `S` labels the initial noise, 0 the final image. For records after the
/// first, `eps_hat`, the branch predictions, the attention maps and the eval
/// counters describe the prediction (made at rank `step_rank + 1`) that
/// produced the stored latent.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step_rank: usize,
    /// Training timestep the stored latent lives at.
    pub t: usize,
    pub x: LatentGrid,
    pub eps_hat: Option<LatentGrid>,
    pub eps_cond: Option<LatentGrid>,
    pub eps_uncond: Option<LatentGrid>,
    pub attention: Vec<AttentionMap>,
    pub cond_evals: u32,
    pub uncond_evals: u32,
}

/// Full per-step record of one sampling run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub policy: GuidancePolicy,
    pub seed: u64,
    /// `S + 1` records: the initial noise plus one per sampled step.
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_x0(&self) -> &LatentGrid {
        &self.records.last().expect("trajectory has records").x
    }

    /// Step records paired with the rank of the prediction they carry
    /// (ranks descend from `S` to 1).
    pub fn steps(&self) -> impl Iterator<Item = (usize, &StepRecord)> {
        self.records.iter().skip(1).map(|r| (r.step_rank + 1, r))
    }

    pub fn total_cond_evals(&self) -> u64 {
        self.records.iter().map(|r| r.cond_evals as u64).sum()
    }

    pub fn total_uncond_evals(&self) -> u64 {
        self.records.iter().map(|r| r.uncond_evals as u64).sum()
    }

    /// Number of denoiser forward passes actually executed.
    pub fn total_evals(&self) -> u64 {
        self.total_cond_evals() + self.total_uncond_evals()
    }
}

/// Runs a full sampling trajectory from seeded Gaussian noise.
///
/// The same `(model, schedule, policy, conditions, seed)` always reproduces
/// the same trajectory bit for bit.
pub fn sample_trajectory<D: Denoiser>(
    model: &D,
    sched: &NoiseSchedule,
    policy: &GuidancePolicy,
    cond: &TokenSequence,
    cond2: Option<&TokenSequence>,
    null: &TokenSequence,
    seed: u64,
) -> Result<Trajectory, EngineError> {
    let s = sched.num_sampled_steps();
    policy.validate(s)?;
    if (policy.mode == GuidanceMode::Switch) != cond2.is_some() {
        return Err(EngineError::SecondConditionMismatch);
    }

    let (channels, m, n) = model.latent_shape();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = LatentGrid::standard_normal(channels, m, n, &mut rng);

    let mut records = Vec::with_capacity(s + 1);
    records.push(StepRecord {
        step_rank: s,
        t: sched.timestep_at_rank(s),
        x: x.clone(),
        eps_hat: None,
        eps_cond: None,
        eps_uncond: None,
        attention: Vec::new(),
        cond_evals: 0,
        uncond_evals: 0,
    });

    for rank in (1..=s).rev() {
        let t = sched.timestep_at_rank(rank);
        let t_prev = sched.timestep_after_rank(rank);
        let pred = staged_predict(model, rank, &x, cond, cond2, null, policy, sched)?;
        x = ddim_step(&x, t, t_prev, &pred.eps, sched)?;
        records.push(StepRecord {
            step_rank: rank - 1,
            t: t_prev,
            x: x.clone(),
            eps_hat: Some(pred.eps),
            eps_cond: pred.eps_cond,
            eps_uncond: pred.eps_uncond,
            attention: pred.attention,
            cond_evals: pred.cond_evals,
            uncond_evals: pred.uncond_evals,
        });
    }

    Ok(Trajectory {
        policy: *policy,
        seed,
        records,
    })
}

/// Fraction of forward passes saved relative to the `a = 0` baseline run.
pub fn eval_savings(traj: &Trajectory, baseline: &Trajectory) -> Result<f64, EngineError> {
    let base = baseline.total_evals();
    if base == 0 {
        return Err(EngineError::EmptyBaseline);
    }
    Ok(1.0 - traj.total_evals() as f64 / base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PromptEncoder, SEQ_LEN, TOKEN_DIM};
    use crate::rng;
    use core::cell::Cell;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(1000, 1e-4, 0.02, 50).unwrap()
    }

    fn random_grid(seed: u64, c: usize, m: usize, n: usize) -> LatentGrid {
        let mut r = rng::stream(seed, 1);
        LatentGrid::standard_normal(c, m, n, &mut r)
    }

    #[test]
    fn forward_noise_identity_and_degenerate_cases() {
        let sched = sched();
        let x0 = random_grid(1, 3, 8, 8);
        let eps = random_grid(2, 3, 8, 8);
        // t = 0: alpha_bar = 1 exactly, output is x0 regardless of eps.
        let out = forward_noise(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(out.max_abs_diff(&x0).unwrap(), 0.0);
        // eps = 0.
        let zero = LatentGrid::zeros(3, 8, 8);
        let t = 400;
        let out = forward_noise(&x0, t, &zero, &sched).unwrap();
        let expected = x0.scaled(sched.sqrt_alpha_bar(t));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
        // x0 = 0.
        let out = forward_noise(&zero, t, &eps, &sched).unwrap();
        let expected = eps.scaled(sched.sqrt_one_minus_alpha_bar(t));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
        // Shape mismatch.
        let small = LatentGrid::zeros(3, 4, 4);
        assert!(matches!(
            forward_noise(&x0, t, &small, &sched),
            Err(EngineError::Grid(GridError::ShapeMismatch { .. }))
        ));
        assert!(matches!(
            forward_noise(&x0, 1001, &eps, &sched),
            Err(EngineError::TimestepOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn forward_noise_is_linear(seed in 0u64..1000, t in 0usize..=1000) {
            let sched = sched();
            let u = random_grid(seed, 1, 6, 6);
            let v = random_grid(seed + 1, 1, 6, 6);
            let e = random_grid(seed + 2, 1, 6, 6);
            let f = random_grid(seed + 3, 1, 6, 6);
            let (alpha, beta) = (0.7, -1.3);
            let lhs = forward_noise(
                &u.affine_combine(alpha, &v, beta).unwrap(),
                t,
                &e.affine_combine(alpha, &f, beta).unwrap(),
                &sched,
            ).unwrap();
            let rhs = forward_noise(&u, t, &e, &sched).unwrap()
                .affine_combine(alpha, &forward_noise(&v, t, &f, &sched).unwrap(), beta)
                .unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_zero_eps_is_pure_rescaling() {
        let sched = sched();
        let x = random_grid(4, 3, 8, 8);
        let zero = LatentGrid::zeros(3, 8, 8);
        let out = ddim_step(&x, 600, 400, &zero, &sched).unwrap();
        let expected = x.scaled((sched.alpha_bar(400) / sched.alpha_bar(600)).sqrt());
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn ddim_step_degenerate_and_ordering() {
        let sched = sched();
        let x = random_grid(5, 1, 4, 4);
        let e = random_grid(6, 1, 4, 4);
        let same = ddim_step(&x, 500, 500, &e, &sched).unwrap();
        assert_eq!(same.max_abs_diff(&x).unwrap(), 0.0);
        assert!(matches!(
            ddim_step(&x, 400, 500, &e, &sched),
            Err(EngineError::StepOrdering { .. })
        ));
    }

    #[test]
    fn ddim_chain_with_true_noise_recovers_x0() {
        // Closed-form substitution oracle: x_t built from known (x0, eps)
        // stays on the deterministic path, so chaining with eps_hat = eps
        // must land back on x0.
        let sched = sched();
        for case in 0..10u64 {
            let x0 = random_grid(100 + case, 3, 8, 8);
            let eps = random_grid(200 + case, 3, 8, 8);
            let mut x = forward_noise(&x0, 1000, &eps, &sched).unwrap();
            for rank in (1..=50usize).rev() {
                let t = sched.timestep_at_rank(rank);
                let t_prev = sched.timestep_after_rank(rank);
                x = ddim_step(&x, t, t_prev, &eps, &sched).unwrap();
            }
            let rel = x.sub(&x0).unwrap().l2_norm() / x0.l2_norm();
            assert!(rel <= 1e-6, "case {case}: relative error {rel}");
        }
    }

    /// Stub denoiser returning constants: one value for the null condition,
    /// another for any other sequence. Counts forward passes.
    struct ConstModel {
        null: TokenSequence,
        uncond_value: f64,
        cond_value: f64,
        cond_calls: Cell<u32>,
        uncond_calls: Cell<u32>,
    }

    impl ConstModel {
        fn new(uncond_value: f64, cond_value: f64) -> (Self, TokenSequence, TokenSequence) {
            let enc = PromptEncoder::new(TOKEN_DIM, SEQ_LEN, 3).unwrap();
            let null = enc.null_condition();
            let cond = enc.encode_prompt(&crate::prompt::PromptSpec::all()[0]);
            let cond2 = enc.encode_prompt(&crate::prompt::PromptSpec::all()[1]);
            (
                Self {
                    null: null.clone(),
                    uncond_value,
                    cond_value,
                    cond_calls: Cell::new(0),
                    uncond_calls: Cell::new(0),
                },
                cond,
                cond2,
            )
        }
    }

    impl Denoiser for ConstModel {
        fn latent_shape(&self) -> (usize, usize, usize) {
            (1, 2, 2)
        }

        fn predict(&self, _t: usize, x: &LatentGrid, tokens: &TokenSequence) -> Result<DenoiserOutput, EngineError> {
            let value = if *tokens == self.null {
                self.uncond_calls.set(self.uncond_calls.get() + 1);
                self.uncond_value
            } else {
                self.cond_calls.set(self.cond_calls.get() + 1);
                self.cond_value
            };
            let (c, m, n) = x.shape();
            Ok(DenoiserOutput {
                eps: LatentGrid::filled(c, m, n, value),
                attention: Vec::new(),
            })
        }
    }

    #[test]
    fn cfg_matches_the_guidance_formula() {
        let (model, cond, _) = ConstModel::new(0.1, 0.3);
        let x = LatentGrid::zeros(1, 2, 2);
        // Scalar stand-in: 0.1 + 7.5 * (0.3 - 0.1) = 1.6.
        let out = cfg_predict(&model, 500, &x, &cond, &model.null, 7.5).unwrap();
        assert!((out.eps.get(0, 0, 0) - 1.6).abs() < 1e-12);
        // w = 1 returns the conditional prediction.
        let out = cfg_predict(&model, 500, &x, &cond, &model.null, 1.0).unwrap();
        assert!((out.eps.get(0, 0, 0) - 0.3).abs() < 1e-15);
        assert_eq!((out.cond_evals, out.uncond_evals), (1, 1));
        // w = 0 skips the conditional pass.
        model.cond_calls.set(0);
        let out = cfg_predict(&model, 500, &x, &cond, &model.null, 0.0).unwrap();
        assert_eq!(out.eps.get(0, 0, 0), 0.1);
        assert_eq!(model.cond_calls.get(), 0);
        assert_eq!((out.cond_evals, out.uncond_evals), (0, 1));
    }

    #[test]
    fn drop_late_accounting_is_exact() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(0.0, 1.0);
        let policy = GuidancePolicy::drop_late(7.5, 20);
        let traj = sample_trajectory(&model, &schedule, &policy, &cond, None, &model.null, 11).unwrap();
        assert_eq!(traj.records.len(), 51);
        assert_eq!(traj.total_cond_evals(), 30);
        assert_eq!(traj.total_uncond_evals(), 50);
        assert_eq!(model.cond_calls.get() + model.uncond_calls.get(), 80);

        let full = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::drop_late(7.5, 0),
            &cond,
            None,
            &model.null,
            11,
        )
        .unwrap();
        assert_eq!(full.total_evals(), 100);
        let savings = eval_savings(&traj, &full).unwrap();
        assert!((savings - 0.20).abs() < 1e-12, "savings {savings}");
        assert!((eval_savings(&full, &full).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn drop_late_at_s_never_evaluates_the_condition() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(0.0, 1.0);
        let policy = GuidancePolicy::drop_late(7.5, 50);
        let traj = sample_trajectory(&model, &schedule, &policy, &cond, None, &model.null, 3).unwrap();
        assert_eq!(traj.total_cond_evals(), 0);
        assert_eq!(traj.total_uncond_evals(), 50);
        assert_eq!(model.cond_calls.get(), 0);
    }

    #[test]
    fn full_mode_equals_drop_late_zero() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(-0.2, 0.4);
        let full = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::full(7.5),
            &cond,
            None,
            &model.null,
            17,
        )
        .unwrap();
        let drop0 = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::drop_late(7.5, 0),
            &cond,
            None,
            &model.null,
            17,
        )
        .unwrap();
        for (a, b) in full.records.iter().zip(&drop0.records) {
            assert_eq!(a.x.max_abs_diff(&b.x).unwrap(), 0.0);
            assert_eq!((a.cond_evals, a.uncond_evals), (b.cond_evals, b.uncond_evals));
        }
    }

    #[test]
    fn switch_with_identical_conditions_equals_full() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(-0.2, 0.4);
        let full = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::full(7.5),
            &cond,
            None,
            &model.null,
            23,
        )
        .unwrap();
        let switched = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::switch(7.5, 25),
            &cond,
            Some(&cond),
            &model.null,
            23,
        )
        .unwrap();
        assert_eq!(full.final_x0().max_abs_diff(switched.final_x0()).unwrap(), 0.0);
        assert_eq!(switched.total_evals(), 100);
    }

    #[test]
    fn same_seed_gives_bit_identical_trajectories() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(0.05, 0.3);
        let policy = GuidancePolicy::drop_late(7.5, 10);
        let a = sample_trajectory(&model, &schedule, &policy, &cond, None, &model.null, 99).unwrap();
        let b = sample_trajectory(&model, &schedule, &policy, &cond, None, &model.null, 99).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.x, rb.x);
        }
        let c = sample_trajectory(&model, &schedule, &policy, &cond, None, &model.null, 100).unwrap();
        assert_ne!(a.records[0].x, c.records[0].x);
    }

    #[test]
    fn configuration_errors() {
        let schedule = sched();
        let (model, cond, cond2) = ConstModel::new(0.0, 1.0);
        // Missing second condition in SWITCH mode.
        assert!(matches!(
            sample_trajectory(
                &model,
                &schedule,
                &GuidancePolicy::switch(7.5, 5),
                &cond,
                None,
                &model.null,
                1
            ),
            Err(EngineError::SecondConditionMismatch)
        ));
        // Unexpected second condition outside SWITCH mode.
        assert!(matches!(
            sample_trajectory(
                &model,
                &schedule,
                &GuidancePolicy::full(7.5),
                &cond,
                Some(&cond2),
                &model.null,
                1
            ),
            Err(EngineError::SecondConditionMismatch)
        ));
        // Drop boundary beyond S.
        assert!(matches!(
            sample_trajectory(
                &model,
                &schedule,
                &GuidancePolicy::drop_late(7.5, 51),
                &cond,
                None,
                &model.null,
                1
            ),
            Err(EngineError::DropBoundaryOutOfRange { .. })
        ));
        // Negative guidance scale.
        assert!(matches!(
            cfg_predict(&model, 500, &LatentGrid::zeros(1, 2, 2), &cond, &model.null, -1.0),
            Err(EngineError::NegativeGuidanceScale)
        ));
    }

    #[test]
    fn drop_early_mirrors_the_window() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(0.0, 1.0);
        // a = 0: never guided.
        let none = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::drop_early(7.5, 0),
            &cond,
            None,
            &model.null,
            7,
        )
        .unwrap();
        assert_eq!(none.total_cond_evals(), 0);
        // a = S: guidance everywhere, identical to the full run.
        let all = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::drop_early(7.5, 50),
            &cond,
            None,
            &model.null,
            7,
        )
        .unwrap();
        let full = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::full(7.5),
            &cond,
            None,
            &model.null,
            7,
        )
        .unwrap();
        assert_eq!(all.final_x0().max_abs_diff(full.final_x0()).unwrap(), 0.0);
        // Intermediate boundary: S + a passes in total.
        let mid = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::drop_early(7.5, 20),
            &cond,
            None,
            &model.null,
            7,
        )
        .unwrap();
        assert_eq!(mid.total_evals(), 70);
        assert_eq!(mid.total_cond_evals(), 20);
    }

    #[test]
    fn trajectory_labels_follow_the_schedule() {
        let schedule = sched();
        let (model, cond, _) = ConstModel::new(0.0, 1.0);
        let traj = sample_trajectory(
            &model,
            &schedule,
            &GuidancePolicy::full(7.5),
            &cond,
            None,
            &model.null,
            5,
        )
        .unwrap();
        assert_eq!(traj.records[0].step_rank, 50);
        assert_eq!(traj.records[0].t, 1000);
        assert_eq!(traj.records[50].step_rank, 0);
        assert_eq!(traj.records[50].t, 0);
        let ranks: Vec<usize> = traj.steps().map(|(rank, _)| rank).collect();
        let expected: Vec<usize> = (1..=50).rev().collect();
        assert_eq!(ranks, expected);
    }
}
