//! Forward-process noise schedule and the DDIM sampling subsequence.

use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

/// Error raised by [`NoiseSchedule::build`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    /// `beta_min`/`beta_max` outside `0 < beta_min < beta_max < 1`.
    InvalidBetaRange,
    /// Sampling step count outside `1..=T_train`.
    InvalidStepCount,
    /// `S` must divide `T_train` for the uniform subsequence.
    NotDivisible,
    /// The cumulative product does not decay below 1e-3 at `T_train`,
    /// so the terminal latent would not approximate a standard Gaussian.
    TailTooLarge,
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::InvalidBetaRange => write!(f, "beta range must satisfy 0 < beta_min < beta_max < 1"),
            ScheduleError::InvalidStepCount => write!(f, "sampling step count must be in 1..=T_train"),
            ScheduleError::NotDivisible => write!(f, "step count must divide T_train"),
            ScheduleError::TailTooLarge => write!(f, "alpha_bar at T_train must fall below 1e-3"),
        }
    }
}

impl core::error::Error for ScheduleError {}

/// Cumulative signal-retention coefficients and the sampled-step subsequence.
///
/// `alpha_bar[t]` is the product of `(1 - beta_i)` for `i = 1..=t`, with
/// `alpha_bar[0] = 1` exactly. It decreases strictly in `t`: the clean signal
/// is scaled by `sqrt(alpha_bar[t])` and the injected Gaussian noise by
/// `sqrt(1 - alpha_bar[t])`. Sampling visits the `S` timesteps
/// `{T/S, 2T/S, .., T}` in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    alpha_bar: Vec<f64>,
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule with betas linearly interpolated from `beta_min`
    /// (at step 1) to `beta_max` (at step `t_train`), and a uniform `s`-step
    /// DDIM subsequence.
    pub fn build(t_train: usize, beta_min: f64, beta_max: f64, s: usize) -> Result<Self, ScheduleError> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(ScheduleError::InvalidBetaRange);
        }
        if s == 0 || s > t_train {
            return Err(ScheduleError::InvalidStepCount);
        }
        if t_train % s != 0 {
            return Err(ScheduleError::NotDivisible);
        }

        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        let mut product = 1.0;
        for i in 1..=t_train {
            let frac = if t_train > 1 {
                (i - 1) as f64 / (t_train - 1) as f64
            } else {
                0.0
            };
            let beta = beta_min + frac * (beta_max - beta_min);
            product *= 1.0 - beta;
            alpha_bar.push(product);
        }
        if alpha_bar[t_train] >= 1e-3 {
            return Err(ScheduleError::TailTooLarge);
        }

        let stride = t_train / s;
        let ddim_steps = (1..=s).map(|k| k * stride).collect();

        Ok(Self {
            t_train,
            alpha_bar,
            ddim_steps,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// Number of sampled steps `S`.
    pub fn num_sampled_steps(&self) -> usize {
        self.ddim_steps.len()
    }

    /// The strictly increasing sampled timesteps `{T/S, .., T}`.
    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// `alpha_bar` at training timestep `t` (0 maps to exactly 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Timestep at sampled-step rank `r` in `1..=S`. Rank `S` is the first
    /// (noisiest) prediction of a run, rank 1 the last.
    pub fn timestep_at_rank(&self, rank: usize) -> usize {
        self.ddim_steps[rank - 1]
    }

    /// Timestep the sampler lands on after the prediction at rank `r`
    /// (0 after the final step).
    pub fn timestep_after_rank(&self, rank: usize) -> usize {
        if rank >= 2 {
            self.ddim_steps[rank - 2]
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::build(1000, 1e-4, 0.02, 50).unwrap()
    }

    #[test]
    fn first_factor_matches_beta_min() {
        // Single-factor product: alpha_bar[1] = 1 - 1e-4.
        let sched = default_schedule();
        assert_eq!(sched.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(sched.alpha_bar(0), 1.0);
    }

    #[test]
    fn cumulative_product_matches_running_oracle() {
        // Independent running-product oracle over the same beta ramp.
        let sched = default_schedule();
        let mut product = 1.0f64;
        for i in 1..=1000usize {
            let beta = 1e-4 + ((i - 1) as f64 / 999.0) * (0.02 - 1e-4);
            product *= 1.0 - beta;
        }
        let got = sched.alpha_bar(1000);
        assert!((got - product).abs() <= 1e-18 + 1e-12 * product.abs());
        assert!(got < 1e-3);
    }

    #[test]
    fn ddim_subsequence_is_uniform() {
        let sched = default_schedule();
        let expected: Vec<usize> = (1..=50).map(|k| k * 20).collect();
        assert_eq!(sched.ddim_steps(), expected.as_slice());
        assert_eq!(sched.timestep_at_rank(50), 1000);
        assert_eq!(sched.timestep_at_rank(1), 20);
        assert_eq!(sched.timestep_after_rank(1), 0);
        assert_eq!(sched.timestep_after_rank(50), 980);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let sched = default_schedule();
        for t in 1..=1000usize {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1), "not decreasing at {t}");
        }
    }

    #[test]
    fn signal_and_noise_coefficients_stay_in_unit_range() {
        let sched = default_schedule();
        for &t in sched.ddim_steps() {
            let a = sched.sqrt_alpha_bar(t);
            let b = sched.sqrt_one_minus_alpha_bar(t);
            assert!((0.0..=1.0).contains(&a));
            assert!((0.0..=1.0).contains(&b));
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_errors() {
        assert_eq!(
            NoiseSchedule::build(1000, 0.02, 1e-4, 50).unwrap_err(),
            ScheduleError::InvalidBetaRange
        );
        assert_eq!(
            NoiseSchedule::build(1000, 1e-4, 0.02, 0).unwrap_err(),
            ScheduleError::InvalidStepCount
        );
        assert_eq!(
            NoiseSchedule::build(1000, 1e-4, 0.02, 33).unwrap_err(),
            ScheduleError::NotDivisible
        );
        // A short ramp keeps alpha_bar large at the end.
        assert_eq!(
            NoiseSchedule::build(10, 1e-4, 0.02, 5).unwrap_err(),
            ScheduleError::TailTooLarge
        );
    }
}
