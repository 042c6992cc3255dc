//! Binary checkpoint format for the toy denoiser.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"DNLB"
//! version u32 (currently 1)
//! hyper   channels, m, n, attn_dim, token_len, token_dim, hidden_dim: u32
//!         init_seed: u64
//! steps   train_steps: u64
//! rng     seed: 32 bytes, word_pos: u128
//! tensors count: u32, then per tensor:
//!         name_len: u32, name bytes, rows: u32, cols: u32,
//!         rows*cols f32 values
//! ```
//!
//! A load of a save reproduces forward outputs bit for bit: the model keeps
//! its parameters f32-representable at all times.

use std::io::{Read, Write};
use std::path::Path;

use lab_core::denoiser::{DenoiserHyper, DenoiserModel, RngSnapshot};

use crate::error::{LabError, Result};

const MAGIC: &[u8; 4] = b"DNLB";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let h = model.hyper();
    for dim in [h.channels, h.m, h.n, h.attn_dim, h.token_len, h.token_dim, h.hidden_dim] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&h.init_seed.to_le_bytes());
    out.extend_from_slice(&model.train_steps().to_le_bytes());
    let snapshot = model.rng_snapshot();
    out.extend_from_slice(&snapshot.seed);
    out.extend_from_slice(&snapshot.word_pos.to_le_bytes());

    let tensors = model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for &v in t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Byte reader tracking its offset so format errors can name the position.
struct Reader {
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(LabError::data(format!(
                "checkpoint truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        let b = self.take(16, what)?;
        Ok(u128::from_le_bytes(b.try_into().expect("length checked")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                LabError::dependency(format!(
                    "checkpoint {} not found; produce it with the `train` step",
                    path.display()
                ))
            } else {
                LabError::from(e)
            }
        })?
        .read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(LabError::data(format!(
            "bad checkpoint magic {magic:?} at byte 0 (expected \"DNLB\")"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabError::data(format!(
            "unsupported checkpoint version {version} at byte 4 (this build reads version {VERSION})"
        )));
    }
    let mut dims = [0usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32(&format!("hyper field {i}"))? as usize;
    }
    let init_seed = r.u64("init seed")?;
    let hyper = DenoiserHyper {
        channels: dims[0],
        m: dims[1],
        n: dims[2],
        attn_dim: dims[3],
        token_len: dims[4],
        token_dim: dims[5],
        hidden_dim: dims[6],
        init_seed,
    };
    let train_steps = r.u64("train steps")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("length checked");
    let word_pos = r.u128("rng word position")?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
    for idx in 0..count {
        let name_len = r.u32(&format!("tensor {idx} name length"))? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| LabError::data(format!("tensor {idx} name is not UTF-8 at byte {}", r.pos)))?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let raw = r.take(rows * cols * 4, &format!("tensor {name} data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, rows, cols, data));
    }
    if r.pos != r.bytes.len() {
        return Err(LabError::data(format!(
            "checkpoint has {} trailing bytes at byte {}",
            r.bytes.len() - r.pos,
            r.pos
        )));
    }

    let borrowed: Vec<(&str, usize, usize, Vec<f64>)> = tensors
        .iter()
        .map(|(n, rows, cols, d)| (n.as_str(), *rows, *cols, d.clone()))
        .collect();
    DenoiserModel::from_parts(hyper, &borrowed, train_steps, RngSnapshot { seed, word_pos })
        .map_err(|e| LabError::data(format!("checkpoint does not describe a valid model: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::denoiser::DenoiserModel;
    use lab_core::prompt::{AttributeKind, PromptEncoder, PromptSpec};
    use lab_core::rng;
    use lab_core::LatentGrid;

    fn model() -> DenoiserModel {
        DenoiserModel::init(DenoiserHyper {
            channels: 3,
            m: 8,
            n: 8,
            attn_dim: 16,
            token_len: 8,
            token_dim: 16,
            hidden_dim: 16,
            init_seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_reproduces_forward_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlb");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(m, loaded);

        let enc = PromptEncoder::new(16, 8, 3).unwrap();
        let cond = enc.encode_prompt(&PromptSpec::new(1, 1, AttributeKind::Color).unwrap());
        let mut r = rng::stream(5, 0);
        let x = LatentGrid::standard_normal(3, 8, 8, &mut r);
        let (eps_a, attn_a) = m.predict_noise(500, &x, &cond).unwrap();
        let (eps_b, attn_b) = loaded.predict_noise(500, &x, &cond).unwrap();
        assert_eq!(eps_a, eps_b);
        assert_eq!(attn_a, attn_b);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlb");
        save_checkpoint(&model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn version_bump_is_rejected_with_a_message() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlb");
        save_checkpoint(&model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn truncation_reports_the_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dnlb");
        save_checkpoint(&model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated at byte"), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_a_dependency_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.dnlb")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("train"), "{err}");
    }
}
