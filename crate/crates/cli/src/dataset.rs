//! Dataset generation and the on-disk dataset layout:
//! `img_{i}.f32` dumps, `labels.csv`, a vocabulary listing, and a small
//! `meta.json` carrying the dimensions.

use std::path::Path;

use lab_core::prompt::render::render_example;
use lab_core::prompt::{AttributeKind, PromptSpec, COLORS, NOUNS, TEXTURES};
use lab_core::{rng, LatentGrid};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::formats::{read_f32, write_f32, CsvWriter};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    channels: usize,
    image_size: usize,
    count: usize,
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: PromptSpec,
    pub jitter_seed: u64,
    pub image: LatentGrid,
}

/// Renders the full training set deterministically from the config: every
/// prompt in the vocabulary times `renders_per_prompt` jitters.
pub fn render_dataset(config: &ExperimentConfig) -> Vec<Example> {
    let mut out = Vec::new();
    let size = config.image_size;
    for (p_idx, prompt) in PromptSpec::all().into_iter().enumerate() {
        for rep in 0..config.renders_per_prompt {
            let jitter_seed = rng::mix(config.seed, (p_idx * config.renders_per_prompt + rep) as u64);
            let image = render_example(&prompt, jitter_seed, size, size).expect("vocabulary prompt");
            out.push(Example {
                prompt,
                jitter_seed,
                image,
            });
        }
    }
    out
}

/// Writes the rendered dataset to `dir`.
pub fn write_dataset(dir: &Path, examples: &[Example], image_size: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        channels: 3,
        image_size,
        count: examples.len(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| LabError::data(e.to_string()))?,
    )?;

    let mut labels = CsvWriter::create(
        &dir.join("labels.csv"),
        "index,noun_id,attribute_id,attribute_kind,jitter_seed",
    )?;
    for (i, ex) in examples.iter().enumerate() {
        write_f32(&dir.join(format!("img_{i}.f32")), &ex.image)?;
        labels.row(&[
            i.to_string(),
            ex.prompt.noun_id.to_string(),
            ex.prompt.attribute_id.to_string(),
            ex.prompt.kind.as_str().to_string(),
            ex.jitter_seed.to_string(),
        ])?;
    }
    labels.finish()?;

    let mut vocab = CsvWriter::create(&dir.join("vocab.csv"), "kind,id,word")?;
    for (id, word) in NOUNS.iter().enumerate() {
        vocab.row(&["noun".into(), id.to_string(), (*word).into()])?;
    }
    for (id, word) in COLORS.iter().enumerate() {
        vocab.row(&["color".into(), id.to_string(), (*word).into()])?;
    }
    for (id, word) in TEXTURES.iter().enumerate() {
        vocab.row(&["texture".into(), id.to_string(), (*word).into()])?;
    }
    vocab.finish()?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Example>> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|_| LabError::dependency(format!("dataset {} not found; run `gen-data`", dir.display())))?,
    )
    .map_err(|e| LabError::data(format!("bad dataset meta: {e}")))?;

    let labels = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut out = Vec::with_capacity(meta.count);
    for (line_no, line) in labels.lines().skip(1).enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(LabError::data(format!("labels.csv line {} malformed", line_no + 2)));
        }
        let index: usize = fields[0].parse().map_err(|_| LabError::data("bad index"))?;
        let noun_id: usize = fields[1].parse().map_err(|_| LabError::data("bad noun id"))?;
        let attribute_id: usize = fields[2].parse().map_err(|_| LabError::data("bad attribute id"))?;
        let kind = match fields[3] {
            "color" => AttributeKind::Color,
            "texture" => AttributeKind::Texture,
            other => return Err(LabError::data(format!("unknown attribute kind '{other}'"))),
        };
        let jitter_seed: u64 = fields[4].parse().map_err(|_| LabError::data("bad jitter seed"))?;
        let prompt = PromptSpec::new(noun_id, attribute_id, kind)
            .map_err(|e| LabError::data(format!("labels.csv line {}: {e}", line_no + 2)))?;
        let image = read_f32(
            &dir.join(format!("img_{index}.f32")),
            meta.channels,
            meta.image_size,
            meta.image_size,
        )?;
        out.push(Example {
            prompt,
            jitter_seed,
            image,
        });
    }
    Ok(out)
}
