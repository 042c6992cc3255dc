//! Attention-map experiments: relative F1 convergence, per-class token
//! weights, and guidance-gap norms.

use std::collections::BTreeMap;
use std::path::Path;

use lab_core::engine::GuidanceMode;
use lab_core::probes::{attention_class_weights, guidance_gap_norms, relative_f1_curve};

use super::{Check, Summary};
use crate::error::Result;
use crate::formats::{fmt_f64, CsvWriter};
use crate::pipeline::Bench;

pub fn attn_f1(bench: &Bench, out_dir: &Path) -> Result<Summary> {
    let config = &bench.config;
    let mut summary = Summary::new("attn-f1", config.seed);
    let model = bench.load_model()?;
    let prompts = bench.prompts_for_runs(config.n_prompts)?;
    let policy = bench.policy(GuidanceMode::Full, 0);
    let s = bench.sched.num_sampled_steps();

    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut degenerate = 0usize;
    let mut terminal_exact = true;
    for (i, prompt) in prompts.iter().enumerate() {
        let cond = bench.encoder.encode_prompt(prompt);
        let traj = bench.sample(&model, &policy, &cond, None, bench.run_seed(i as u64))?;
        match relative_f1_curve(&traj, &bench.canny(), config.f1_tol_px) {
            Ok(curve) => {
                if curve.last().map(|(rank, v)| (*rank, *v)) != Some((1, 1.0)) {
                    terminal_exact = false;
                }
                for (rank, value) in curve {
                    let entry = sums.entry(rank).or_insert((0.0, 0));
                    entry.0 += value;
                    entry.1 += 1;
                }
            }
            Err(_) => degenerate += 1,
        }
    }

    let mut csv = CsvWriter::create(&out_dir.join("attn_f1.csv"), "rank,t,mean_relative_f1,n_runs")?;
    let mut midpoint_mean = 0.0;
    for rank in (1..=s).rev() {
        if let Some((sum, count)) = sums.get(&rank) {
            let mean = sum / *count as f64;
            csv.row(&[
                rank.to_string(),
                bench.sched.timestep_at_rank(rank).to_string(),
                fmt_f64(mean),
                count.to_string(),
            ])?;
            if rank == s / 2 {
                midpoint_mean = mean;
            }
        }
    }
    csv.finish()?;

    summary.push(Check::flag("terminal_point_exactly_one", terminal_exact && !sums.is_empty()));
    summary.note(format!(
        "mean relative F1 at the midpoint step (rank {}): {midpoint_mean}",
        s / 2
    ));
    if degenerate > 0 {
        summary.note(format!("{degenerate} degenerate runs skipped"));
    }
    Ok(summary)
}

pub fn token_weights(bench: &Bench, out_dir: &Path) -> Result<Summary> {
    let config = &bench.config;
    let mut summary = Summary::new("token-weights", config.seed);
    let model = bench.load_model()?;
    let prompts = bench.prompts_for_runs(config.n_prompts)?;
    let policy = bench.policy(GuidanceMode::Full, 0);
    let s = bench.sched.num_sampled_steps();

    let mut acc: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
    let mut class_counts = (0usize, 0usize, 0usize);
    for (i, prompt) in prompts.iter().enumerate() {
        let cond = bench.encoder.encode_prompt(prompt);
        let tags = cond.tags().to_vec();
        class_counts = (
            tags.iter().filter(|t| matches!(t, lab_core::prompt::TokenTag::Sos)).count(),
            tags.iter().filter(|t| matches!(t, lab_core::prompt::TokenTag::Sem)).count(),
            tags.iter().filter(|t| matches!(t, lab_core::prompt::TokenTag::Eos)).count(),
        );
        let traj = bench.sample(&model, &policy, &cond, None, bench.run_seed(i as u64))?;
        let weights = attention_class_weights(&traj, &tags).map_err(|e| crate::error::LabError::data(e.to_string()))?;
        for w in weights {
            let entry = acc.entry(w.rank).or_insert(([0.0; 3], 0));
            entry.0[0] += w.sos;
            entry.0[1] += w.sem;
            entry.0[2] += w.eos;
            entry.1 += 1;
        }
    }

    let mut csv = CsvWriter::create(&out_dir.join("token_weights.csv"), "rank,t,w_sos,w_sem,w_eos,n_runs")?;
    let mut distribution_ok = true;
    let mut mean_sos = 0.0;
    for rank in (1..=s).rev() {
        if let Some((sums, count)) = acc.get(&rank) {
            let n = *count as f64;
            let (sos, sem, eos) = (sums[0] / n, sums[1] / n, sums[2] / n);
            let total =
                sos * class_counts.0 as f64 + sem * class_counts.1 as f64 + eos * class_counts.2 as f64;
            if (total - 1.0).abs() > 1e-6 {
                distribution_ok = false;
            }
            mean_sos += sos / s as f64;
            csv.row(&[
                rank.to_string(),
                bench.sched.timestep_at_rank(rank).to_string(),
                fmt_f64(sos),
                fmt_f64(sem),
                fmt_f64(eos),
                count.to_string(),
            ])?;
        }
    }
    csv.finish()?;

    summary.push(Check::flag("class_totals_are_a_distribution", distribution_ok));
    summary.note(format!(
        "mean per-token SOS weight over steps: {mean_sos} (pretrained-scale reference >0.9 per map, reported for comparison only)"
    ));
    Ok(summary)
}

pub fn gap_norms(bench: &Bench, out_dir: &Path) -> Result<Summary> {
    let config = &bench.config;
    let mut summary = Summary::new("gap-norms", config.seed);
    let model = bench.load_model()?;
    let prompts = bench.prompts_for_runs(config.n_prompts.max(100))?;
    let policy = bench.policy(GuidanceMode::Full, 0);
    let s = bench.sched.num_sampled_steps();

    let mut acc: BTreeMap<usize, ([f64; 2], usize)> = BTreeMap::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let cond = bench.encoder.encode_prompt(prompt);
        let traj = bench.sample(&model, &policy, &cond, None, bench.run_seed(i as u64))?;
        let norms = guidance_gap_norms(&traj).map_err(|e| crate::error::LabError::data(e.to_string()))?;
        for g in norms {
            let entry = acc.entry(g.rank).or_insert(([0.0; 2], 0));
            entry.0[0] += g.uncond_rms;
            entry.0[1] += g.gap_rms;
            entry.1 += 1;
        }
    }

    let mut csv = CsvWriter::create(&out_dir.join("gap_norms.csv"), "rank,t,uncond_rms,gap_rms,n_runs")?;
    let mut first_quarter = (0.0, 0usize);
    let mut last_quarter = (0.0, 0usize);
    for rank in (1..=s).rev() {
        if let Some((sums, count)) = acc.get(&rank) {
            let n = *count as f64;
            let gap = sums[1] / n;
            csv.row(&[
                rank.to_string(),
                bench.sched.timestep_at_rank(rank).to_string(),
                fmt_f64(sums[0] / n),
                fmt_f64(gap),
                count.to_string(),
            ])?;
            // Ranks descend during generation: the first quarter of steps is
            // the top quarter of ranks.
            if rank > 3 * s / 4 {
                first_quarter.0 += gap;
                first_quarter.1 += 1;
            }
            if rank <= s / 4 {
                last_quarter.0 += gap;
                last_quarter.1 += 1;
            }
        }
    }
    csv.finish()?;

    let early = first_quarter.0 / first_quarter.1.max(1) as f64;
    let late = last_quarter.0 / last_quarter.1.max(1) as f64;
    summary.push(Check::flag("gap_norm_decreases_over_generation", late < early));
    summary.note(format!(
        "mean gap norm over the first quarter of steps: {early}, final quarter: {late}, runs: {}",
        prompts.len()
    ));
    Ok(summary)
}
