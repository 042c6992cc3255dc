//! Experiment configuration: a flat TOML file with documented keys, every
//! key optional, command-line flags overriding file values. A copy of the
//! effective config is written beside every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; per-run streams derive from it.
    pub seed: u64,
    /// Output directory for the subcommand's artifacts.
    pub out_dir: PathBuf,

    // Noise schedule.
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of sampled DDIM steps `S`.
    pub ddim_steps: usize,

    // Data and model dimensions.
    pub image_size: usize,
    pub token_len: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
    pub hidden_dim: usize,
    /// Seed of the frozen prompt encoder.
    pub encoder_seed: u64,
    /// Seed of the model initialization.
    pub model_seed: u64,

    // Dataset.
    /// Jittered renders per prompt for training data.
    pub renders_per_prompt: usize,
    /// Optional on-disk dataset (written by `gen-data`); when unset,
    /// training renders the dataset in memory from the config.
    pub dataset_dir: Option<PathBuf>,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout_p: f64,
    /// Trained checkpoint consumed by model-dependent experiments.
    pub checkpoint: Option<PathBuf>,

    // Guidance policy.
    pub w: f64,
    /// Drop boundary `a` in sampled-step ranks.
    pub a: usize,
    /// One of `full`, `drop-late`, `drop-early`, `switch`.
    pub mode: String,
    /// Boundary grid for sweep experiments.
    pub a_values: Vec<usize>,

    // Experiment sizes.
    /// Number of sampling runs (prompts are cycled when this exceeds the
    /// vocabulary).
    pub n_prompts: usize,
    /// Number of switched prompt pairs.
    pub n_pairs: usize,
    /// Runs per grid point in sweep experiments (windows, substitutions).
    pub n_sweep: usize,
    /// Monte-Carlo trials for the concentration check.
    pub n_trials: usize,
    pub band_fraction: f64,

    // Probe parameters.
    pub canny_sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub f1_tol_px: usize,

    // Prompt used by `sample`.
    pub noun_id: usize,
    pub attribute_id: usize,
    /// `color` or `texture`.
    pub attribute_kind: String,
    // Secondary prompt for `sample` in switch mode.
    pub noun_id_b: usize,
    pub attribute_id_b: usize,
    pub attribute_kind_b: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs/out"),
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            ddim_steps: 50,
            image_size: 16,
            token_len: 8,
            token_dim: 16,
            attn_dim: 32,
            hidden_dim: 32,
            encoder_seed: 7,
            model_seed: 1,
            renders_per_prompt: 10,
            dataset_dir: None,
            epochs: 60,
            batch_size: 16,
            lr: 1e-3,
            cond_dropout_p: 0.1,
            checkpoint: None,
            w: 7.5,
            a: 0,
            mode: "full".into(),
            a_values: vec![0, 10, 20, 30, 40, 50],
            n_prompts: 200,
            n_pairs: 200,
            n_sweep: 40,
            n_trials: 2000,
            band_fraction: 0.2,
            canny_sigma: 1.0,
            canny_low: 0.1,
            canny_high: 0.2,
            f1_tol_px: 1,
            noun_id: 0,
            attribute_id: 0,
            attribute_kind: "color".into(),
            noun_id_b: 1,
            attribute_id_b: 1,
            attribute_kind_b: "color".into(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub w: Option<f64>,
    pub a: Option<usize>,
    pub mode: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| LabError::data(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| LabError::data(format!("bad config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            config.out_dir = out.clone();
        }
        if let Some(w) = overrides.w {
            config.w = w;
        }
        if let Some(a) = overrides.a {
            config.a = a;
        }
        if let Some(mode) = &overrides.mode {
            config.mode = mode.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.w < 0.0 || !self.w.is_finite() {
            return Err(LabError::usage("w must be a finite value >= 0"));
        }
        if !matches!(self.mode.as_str(), "full" | "drop-late" | "drop-early" | "switch") {
            return Err(LabError::usage(format!(
                "unknown mode '{}', expected full|drop-late|drop-early|switch",
                self.mode
            )));
        }
        if !matches!(self.attribute_kind.as_str(), "color" | "texture")
            || !matches!(self.attribute_kind_b.as_str(), "color" | "texture")
        {
            return Err(LabError::usage("attribute_kind must be color or texture"));
        }
        Ok(())
    }

    /// Serializes the effective config beside run outputs (provenance).
    pub fn write_copy(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| LabError::data(format!("serialize config: {e}")))?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_files_inherit_defaults_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "seed = 9\nw = 3.5\n").unwrap();
        let config = ExperimentConfig::load(
            Some(&path),
            &Overrides {
                w: Some(5.0),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.w, 5.0);
        assert_eq!(config.t_train, 1000);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "mode = \"sideways\"\n").unwrap();
        let err = ExperimentConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "not_a_key = 1\n").unwrap();
        let err = ExperimentConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
