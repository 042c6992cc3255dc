//! Trajectory export: one directory per run holding `meta.json`, per-step
//! latent dumps `x_{t}.f32`, and `manifest.csv`.

use std::path::Path;

use lab_core::engine::{GuidanceMode, Trajectory};
use lab_core::NoiseSchedule;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::formats::{write_f32, CsvWriter};

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    t_train: usize,
    ddim_steps: usize,
    mode: &'a str,
    w: f64,
    a: usize,
    seed: u64,
    cond_evals: u64,
    uncond_evals: u64,
    total_evals: u64,
}

pub fn mode_name(mode: GuidanceMode) -> &'static str {
    match mode {
        GuidanceMode::Full => "full",
        GuidanceMode::DropLate => "drop-late",
        GuidanceMode::DropEarly => "drop-early",
        GuidanceMode::Switch => "switch",
    }
}

/// Writes one run directory. Latent dumps are named by the training
/// timestep of the stored state, from `x_{T}.f32` (initial noise) down to
/// `x_0.f32` (final image).
pub fn export_trajectory(dir: &Path, traj: &Trajectory, sched: &NoiseSchedule) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = RunMeta {
        t_train: sched.t_train(),
        ddim_steps: sched.num_sampled_steps(),
        mode: mode_name(traj.policy.mode),
        w: traj.policy.w,
        a: traj.policy.drop_start,
        seed: traj.seed,
        cond_evals: traj.total_cond_evals(),
        uncond_evals: traj.total_uncond_evals(),
        total_evals: traj.total_evals(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| LabError::data(e.to_string()))?,
    )?;

    let mut manifest = CsvWriter::create(&dir.join("manifest.csv"), "step_rank,t,cond_evals,uncond_evals")?;
    for record in &traj.records {
        write_f32(&dir.join(format!("x_{}.f32", record.t)), &record.x)?;
        manifest.row(&[
            record.step_rank.to_string(),
            record.t.to_string(),
            record.cond_evals.to_string(),
            record.uncond_evals.to_string(),
        ])?;
    }
    manifest.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::denoiser::{DenoiserHyper, DenoiserModel};
    use lab_core::engine::{sample_trajectory, GuidancePolicy};
    use lab_core::prompt::{AttributeKind, PromptEncoder, PromptSpec};

    #[test]
    fn run_directory_has_meta_dumps_and_manifest() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        let model = DenoiserModel::init(DenoiserHyper {
            channels: 3,
            m: 8,
            n: 8,
            attn_dim: 16,
            token_len: 8,
            token_dim: 16,
            hidden_dim: 16,
            init_seed: 2,
        })
        .unwrap();
        let enc = PromptEncoder::new(16, 8, 3).unwrap();
        let cond = enc.encode_prompt(&PromptSpec::new(0, 0, AttributeKind::Color).unwrap());
        let null = enc.null_condition();
        let policy = GuidancePolicy::drop_late(7.5, 4);
        let traj = sample_trajectory(&model, &sched, &policy, &cond, None, &null, 9).unwrap();

        let dir = tempfile::tempdir().unwrap();
        export_trajectory(dir.path(), &traj, &sched).unwrap();

        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let lines: Vec<&str> = manifest.lines().collect();
        assert_eq!(lines.len(), 12); // header + 11 records
        assert_eq!(lines[0], "step_rank,t,cond_evals,uncond_evals");
        assert!(lines[1].starts_with("10,1000,0,0"));
        assert!(dir.path().join("x_1000.f32").exists());
        assert!(dir.path().join("x_0.f32").exists());

        let meta = std::fs::read_to_string(dir.path().join("meta.json")).unwrap();
        assert!(meta.contains("\"mode\": \"drop-late\""));
        assert!(meta.contains("\"total_evals\": 16"));
    }
}
