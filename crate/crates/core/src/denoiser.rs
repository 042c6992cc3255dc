//! Trainable conditional noise predictor with one cross-attention block.
//!
//! Architecture, per pixel: a linear patch encoder over the 3x3 channel
//! neighborhood plus normalized position features, an additive projected
//! sinusoidal time embedding, single-head cross-attention over the token
//! sequence (`Q` from the pixel feature, `K`/`V` from the tokens), a residual
//! connection, and a two-layer tanh MLP head back to the latent channels.
//! All gradients are derived by hand and validated against central finite
//! differences.
//!
//! Parameters are held as `f64` values that are exactly representable in
//! `f32`, and every update re-quantizes, so a 32-bit checkpoint roundtrip
//! reproduces forward outputs bit for bit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::engine::{AttentionMap, Denoiser, DenoiserOutput, EngineError};
use crate::grid::{GridError, LatentGrid};
use crate::prompt::{KvScope, TokenSequence};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Number of position features appended to each pixel's patch vector.
const POS_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenoiserError {
    BadHyper,
    EmptyDataset,
    BadDropout,
    /// Tensor set handed to `from_parts` does not match the hyperparameters.
    TensorMismatch,
}

impl fmt::Display for DenoiserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserError::BadHyper => write!(f, "hyperparameters must be positive (attention dim even)"),
            DenoiserError::EmptyDataset => write!(f, "training dataset is empty"),
            DenoiserError::BadDropout => write!(f, "condition dropout probability must lie in [0, 1]"),
            DenoiserError::TensorMismatch => write!(f, "checkpoint tensors do not match the hyperparameters"),
        }
    }
}

impl core::error::Error for DenoiserError {}

/// Model dimensions and the initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserHyper {
    pub channels: usize,
    pub m: usize,
    pub n: usize,
    /// Attention feature dimension `d`; must be even for the sinusoidal
    /// time embedding.
    pub attn_dim: usize,
    pub token_len: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub init_seed: u64,
}

impl Default for DenoiserHyper {
    fn default() -> Self {
        Self {
            channels: 3,
            m: 16,
            n: 16,
            attn_dim: 32,
            token_len: 8,
            token_dim: 16,
            hidden_dim: 32,
            init_seed: 0,
        }
    }
}

impl DenoiserHyper {
    fn validate(&self) -> Result<(), DenoiserError> {
        let positive = self.channels > 0
            && self.m > 0
            && self.n > 0
            && self.attn_dim > 0
            && self.token_len > 0
            && self.token_dim > 0
            && self.hidden_dim > 0;
        if !positive || self.attn_dim % 2 != 0 {
            return Err(DenoiserError::BadHyper);
        }
        Ok(())
    }

    fn patch_in(&self) -> usize {
        9 * self.channels + POS_FEATURES
    }

    fn pixels(&self) -> usize {
        self.m * self.n
    }
}

/// The named parameter tensors, each `rows x cols` (biases have one column).
#[derive(Debug, Clone, PartialEq)]
struct Params {
    w_patch: Vec<f64>,
    b_patch: Vec<f64>,
    w_time: Vec<f64>,
    b_time: Vec<f64>,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    w_h1: Vec<f64>,
    b_h1: Vec<f64>,
    w_h2: Vec<f64>,
    b_h2: Vec<f64>,
}

/// Shape table shared by the model, its gradients and the checkpoint codec.
fn tensor_shapes(h: &DenoiserHyper) -> [(&'static str, usize, usize); 11] {
    let d = h.attn_dim;
    [
        ("w_patch", d, h.patch_in()),
        ("b_patch", d, 1),
        ("w_time", d, d),
        ("b_time", d, 1),
        ("w_q", d, d),
        ("w_k", d, h.token_dim),
        ("w_v", d, h.token_dim),
        ("w_h1", h.hidden_dim, d),
        ("b_h1", h.hidden_dim, 1),
        ("w_h2", h.channels, h.hidden_dim),
        ("b_h2", h.channels, 1),
    ]
}

impl Params {
    fn zeros(h: &DenoiserHyper) -> Self {
        let shapes = tensor_shapes(h);
        let make = |i: usize| vec![0.0; shapes[i].1 * shapes[i].2];
        Self {
            w_patch: make(0),
            b_patch: make(1),
            w_time: make(2),
            b_time: make(3),
            w_q: make(4),
            w_k: make(5),
            w_v: make(6),
            w_h1: make(7),
            b_h1: make(8),
            w_h2: make(9),
            b_h2: make(10),
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 11] {
        [
            &self.w_patch,
            &self.b_patch,
            &self.w_time,
            &self.b_time,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_h1,
            &self.b_h1,
            &self.w_h2,
            &self.b_h2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 11] {
        [
            &mut self.w_patch,
            &mut self.b_patch,
            &mut self.w_time,
            &mut self.b_time,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_h1,
            &mut self.b_h1,
            &mut self.w_h2,
            &mut self.b_h2,
        ]
    }

    fn total_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Rounds to the nearest `f32` so the stored value survives a 32-bit
/// checkpoint exactly.
fn quantize(value: f64) -> f64 {
    value as f32 as f64
}

/// State of the training generator at the end of `train`, persisted in
/// checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Read-only view of one named parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    hyper: DenoiserHyper,
    params: Params,
    train_steps: u64,
    rng_snapshot: RngSnapshot,
}

impl DenoiserModel {
    /// Seeded initialization: each tensor is uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(hyper: DenoiserHyper) -> Result<Self, DenoiserError> {
        hyper.validate()?;
        let mut params = Params::zeros(&hyper);
        let shapes = tensor_shapes(&hyper);
        let mut r = rng::stream(hyper.init_seed, 0x64_6e);
        for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (name, _rows, cols) = shapes[i];
            if name.starts_with('b') {
                continue;
            }
            let scale = 1.0 / (cols as f64).sqrt();
            for w in tensor.iter_mut() {
                *w = quantize((r.random::<f64>() * 2.0 - 1.0) * scale);
            }
        }
        Ok(Self {
            hyper,
            params,
            train_steps: 0,
            rng_snapshot: RngSnapshot::default(),
        })
    }

    /// Rebuilds a model from checkpoint parts. Tensor order, names and
    /// shapes must match [`DenoiserModel::tensors`].
    pub fn from_parts(
        hyper: DenoiserHyper,
        tensors: &[(&str, usize, usize, Vec<f64>)],
        train_steps: u64,
        rng_snapshot: RngSnapshot,
    ) -> Result<Self, DenoiserError> {
        hyper.validate()?;
        let shapes = tensor_shapes(&hyper);
        if tensors.len() != shapes.len() {
            return Err(DenoiserError::TensorMismatch);
        }
        let mut params = Params::zeros(&hyper);
        for (i, slot) in params.tensors_mut().into_iter().enumerate() {
            let (name, rows, cols) = shapes[i];
            let (got_name, got_rows, got_cols, data) = &tensors[i];
            if *got_name != name || *got_rows != rows || *got_cols != cols || data.len() != rows * cols {
                return Err(DenoiserError::TensorMismatch);
            }
            slot.copy_from_slice(data);
            for w in slot.iter_mut() {
                *w = quantize(*w);
            }
        }
        Ok(Self {
            hyper,
            params,
            train_steps,
            rng_snapshot,
        })
    }

    pub fn hyper(&self) -> &DenoiserHyper {
        &self.hyper
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn rng_snapshot(&self) -> &RngSnapshot {
        &self.rng_snapshot
    }

    /// Named tensor views in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let shapes = tensor_shapes(&self.hyper);
        self.params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, data)| TensorView {
                name: shapes[i].0,
                rows: shapes[i].1,
                cols: shapes[i].2,
                data,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    fn check_latent(&self, x: &LatentGrid) -> Result<(), EngineError> {
        let expected = (self.hyper.channels, self.hyper.m, self.hyper.n);
        if x.shape() != expected {
            return Err(EngineError::Grid(GridError::ShapeMismatch {
                left: expected,
                right: x.shape(),
            }));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<(), EngineError> {
        if tokens.len() != self.hyper.token_len || tokens.dim() != self.hyper.token_dim {
            return Err(EngineError::TokenLengthMismatch {
                expected: self.hyper.token_len,
                got: tokens.len(),
            });
        }
        Ok(())
    }

    /// Resolves the key/value sources from the sequence's `kv_scope`,
    /// pulling the untouched companion for the unaltered side.
    fn kv_sources<'a>(
        &self,
        tokens: &'a TokenSequence,
    ) -> Result<(&'a TokenSequence, &'a TokenSequence), EngineError> {
        match tokens.kv_scope() {
            KvScope::Both => Ok((tokens, tokens)),
            KvScope::KeyOnly => {
                let original = tokens.kv_companion().ok_or(EngineError::MissingKvCompanion)?;
                Ok((tokens, original))
            }
            KvScope::ValueOnly => {
                let original = tokens.kv_companion().ok_or(EngineError::MissingKvCompanion)?;
                Ok((original, tokens))
            }
        }
    }

    /// Noise prediction honoring the sequence's `kv_scope`.
    pub fn predict_noise(
        &self,
        t: usize,
        x: &LatentGrid,
        tokens: &TokenSequence,
    ) -> Result<(LatentGrid, AttentionMap), EngineError> {
        let (key_side, value_side) = self.kv_sources(tokens)?;
        self.predict_noise_kv(t, x, key_side, value_side)
    }

    /// Noise prediction with explicit key- and value-side sequences.
    pub fn predict_noise_kv(
        &self,
        t: usize,
        x: &LatentGrid,
        key_tokens: &TokenSequence,
        value_tokens: &TokenSequence,
    ) -> Result<(LatentGrid, AttentionMap), EngineError> {
        self.check_latent(x)?;
        self.check_tokens(key_tokens)?;
        self.check_tokens(value_tokens)?;
        let ws = self.forward(t, x, key_tokens, value_tokens);
        let eps = LatentGrid::from_vec(self.hyper.channels, self.hyper.m, self.hyper.n, ws.eps)
            .expect("forward output has model shape");
        let attn = AttentionMap::from_rows(self.hyper.pixels(), self.hyper.token_len, ws.attn);
        Ok((eps, attn))
    }

    /// Sinusoidal embedding of the timestep, dimension `attn_dim`.
    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let d = self.hyper.attn_dim;
        let mut tau = vec![0.0; d];
        for j in 0..d / 2 {
            let omega = (10_000.0f64).powf(-(2.0 * j as f64) / d as f64);
            let angle = t as f64 * omega;
            tau[2 * j] = angle.sin();
            tau[2 * j + 1] = angle.cos();
        }
        tau
    }

    /// Patch vector for pixel `(i, j)`: zero-padded 3x3 neighborhood per
    /// channel, then normalized position features.
    fn fill_patch(&self, x: &LatentGrid, i: usize, j: usize, out: &mut [f64]) {
        let (c_n, m, n) = (self.hyper.channels, self.hyper.m, self.hyper.n);
        let mut cursor = 0;
        for c in 0..c_n {
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    out[cursor] = if ii >= 0 && ii < m as i64 && jj >= 0 && jj < n as i64 {
                        x.get(c, ii as usize, jj as usize)
                    } else {
                        0.0
                    };
                    cursor += 1;
                }
            }
        }
        let iy = (2.0 * i as f64 - (m as f64 - 1.0)) / m as f64;
        let jx = (2.0 * j as f64 - (n as f64 - 1.0)) / n as f64;
        out[cursor] = iy;
        out[cursor + 1] = jx;
        out[cursor + 2] = iy * jx;
        out[cursor + 3] = iy * iy + jx * jx;
    }

    fn forward(&self, t: usize, x: &LatentGrid, key_tokens: &TokenSequence, value_tokens: &TokenSequence) -> Workspace {
        let h = &self.hyper;
        let (d, l, p_count) = (h.attn_dim, h.token_len, h.pixels());
        let patch_in = h.patch_in();
        let pm = &self.params;

        let mut ws = Workspace::new(h);

        // Patch encoding.
        for p in 0..p_count {
            let (i, j) = (p / h.n, p % h.n);
            self.fill_patch(x, i, j, &mut ws.patches[p * patch_in..(p + 1) * patch_in]);
        }
        for p in 0..p_count {
            let patch = &ws.patches[p * patch_in..(p + 1) * patch_in];
            let feat = &mut ws.h[p * d..(p + 1) * d];
            for i in 0..d {
                let row = &pm.w_patch[i * patch_in..(i + 1) * patch_in];
                let mut acc = pm.b_patch[i];
                for (w, v) in row.iter().zip(patch) {
                    acc += w * v;
                }
                feat[i] = acc;
            }
        }

        // Additive time feature, shared by all pixels.
        ws.tau = self.time_embedding(t);
        for i in 0..d {
            let row = &pm.w_time[i * d..(i + 1) * d];
            let mut acc = pm.b_time[i];
            for (w, v) in row.iter().zip(&ws.tau) {
                acc += w * v;
            }
            ws.time_feat[i] = acc;
        }
        for p in 0..p_count {
            for i in 0..d {
                ws.h[p * d + i] += ws.time_feat[i];
            }
        }

        // Token projections.
        for tok in 0..l {
            let key_src = key_tokens.token(tok);
            let val_src = value_tokens.token(tok);
            for i in 0..d {
                let row_k = &pm.w_k[i * h.token_dim..(i + 1) * h.token_dim];
                let row_v = &pm.w_v[i * h.token_dim..(i + 1) * h.token_dim];
                let mut acc_k = 0.0;
                let mut acc_v = 0.0;
                for idx in 0..h.token_dim {
                    acc_k += row_k[idx] * key_src[idx];
                    acc_v += row_v[idx] * val_src[idx];
                }
                ws.k[tok * d + i] = acc_k;
                ws.v[tok * d + i] = acc_v;
            }
        }

        // Attention.
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for p in 0..p_count {
            let hp = &ws.h[p * d..(p + 1) * d];
            let qp = &mut ws.q[p * d..(p + 1) * d];
            for i in 0..d {
                let row = &pm.w_q[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(hp) {
                    acc += w * v;
                }
                qp[i] = acc;
            }
            let scores = &mut ws.scores[p * l..(p + 1) * l];
            for tok in 0..l {
                let kt = &ws.k[tok * d..(tok + 1) * d];
                let mut acc = 0.0;
                for i in 0..d {
                    acc += qp[i] * kt[i];
                }
                scores[tok] = acc * inv_sqrt_d;
            }
            // Stable softmax.
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let attn = &mut ws.attn[p * l..(p + 1) * l];
            for tok in 0..l {
                let e = (scores[tok] - max).exp();
                attn[tok] = e;
                denom += e;
            }
            for a in attn.iter_mut() {
                *a /= denom;
            }
            let out = &mut ws.attn_out[p * d..(p + 1) * d];
            for tok in 0..l {
                let a = attn[tok];
                let vt = &ws.v[tok * d..(tok + 1) * d];
                for i in 0..d {
                    out[i] += a * vt[i];
                }
            }
        }

        // Residual, then the pointwise MLP head.
        for p in 0..p_count {
            for i in 0..d {
                ws.r[p * d + i] = ws.h[p * d + i] + ws.attn_out[p * d + i];
            }
        }
        for p in 0..p_count {
            let rp = &ws.r[p * d..(p + 1) * d];
            let yp = &mut ws.y[p * h.hidden_dim..(p + 1) * h.hidden_dim];
            for k in 0..h.hidden_dim {
                let row = &pm.w_h1[k * d..(k + 1) * d];
                let mut acc = pm.b_h1[k];
                for (w, v) in row.iter().zip(rp) {
                    acc += w * v;
                }
                yp[k] = acc.tanh();
            }
            for c in 0..h.channels {
                let row = &pm.w_h2[c * h.hidden_dim..(c + 1) * h.hidden_dim];
                let mut acc = pm.b_h2[c];
                for (w, v) in row.iter().zip(yp.iter()) {
                    acc += w * v;
                }
                // eps is channel-major like LatentGrid.
                ws.eps[c * p_count + p] = acc;
            }
        }
        ws
    }

    /// Squared-error loss against `eps_target` (mean over elements) and, if
    /// `grads` is given, its accumulated parameter gradients.
    fn loss_and_backward(
        &self,
        t: usize,
        x_t: &LatentGrid,
        tokens: &TokenSequence,
        eps_target: &LatentGrid,
        mut grads: Option<&mut Params>,
    ) -> f64 {
        let h = &self.hyper;
        let (d, l, p_count) = (h.attn_dim, h.token_len, h.pixels());
        let elems = (h.channels * p_count) as f64;
        let ws = self.forward(t, x_t, tokens, tokens);

        let mut loss = 0.0;
        let mut dz = vec![0.0; h.channels * p_count];
        for idx in 0..dz.len() {
            let diff = ws.eps[idx] - eps_target.as_slice()[idx];
            loss += diff * diff;
            dz[idx] = 2.0 * diff / elems;
        }
        loss /= elems;

        let Some(grads) = grads.as_deref_mut() else {
            return loss;
        };
        let pm = &self.params;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let patch_in = h.patch_in();

        let mut dh = vec![0.0; p_count * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut du = vec![0.0; d];

        for p in 0..p_count {
            // Head backward.
            let yp = &ws.y[p * h.hidden_dim..(p + 1) * h.hidden_dim];
            let rp = &ws.r[p * d..(p + 1) * d];
            let mut dy = vec![0.0; h.hidden_dim];
            for c in 0..h.channels {
                let g = dz[c * p_count + p];
                grads.b_h2[c] += g;
                let row = &mut grads.w_h2[c * h.hidden_dim..(c + 1) * h.hidden_dim];
                let w_row = &pm.w_h2[c * h.hidden_dim..(c + 1) * h.hidden_dim];
                for k in 0..h.hidden_dim {
                    row[k] += g * yp[k];
                    dy[k] += w_row[k] * g;
                }
            }
            let mut dr = vec![0.0; d];
            for k in 0..h.hidden_dim {
                let dm1 = (1.0 - yp[k] * yp[k]) * dy[k];
                grads.b_h1[k] += dm1;
                let g_row = &mut grads.w_h1[k * d..(k + 1) * d];
                let w_row = &pm.w_h1[k * d..(k + 1) * d];
                for j in 0..d {
                    g_row[j] += dm1 * rp[j];
                    dr[j] += w_row[j] * dm1;
                }
            }

            // Residual splits into the feature path and the attention path.
            let d_attn_out = &dr;
            let attn = &ws.attn[p * l..(p + 1) * l];
            let mut da = vec![0.0; l];
            for tok in 0..l {
                let vt = &ws.v[tok * d..(tok + 1) * d];
                let mut acc = 0.0;
                for i in 0..d {
                    acc += d_attn_out[i] * vt[i];
                    dv[tok * d + i] += attn[tok] * d_attn_out[i];
                }
                da[tok] = acc;
            }
            let s_dot: f64 = (0..l).map(|tok| attn[tok] * da[tok]).sum();
            let qp = &ws.q[p * d..(p + 1) * d];
            let mut dq = vec![0.0; d];
            for tok in 0..l {
                let ds = attn[tok] * (da[tok] - s_dot);
                let kt = &ws.k[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dq[i] += ds * kt[i] * inv_sqrt_d;
                    dk[tok * d + i] += ds * qp[i] * inv_sqrt_d;
                }
            }
            let hp = &ws.h[p * d..(p + 1) * d];
            let dh_p = &mut dh[p * d..(p + 1) * d];
            for i in 0..d {
                dh_p[i] += dr[i];
                let g_row = &mut grads.w_q[i * d..(i + 1) * d];
                let w_row = &pm.w_q[i * d..(i + 1) * d];
                let gq = dq[i];
                for j in 0..d {
                    g_row[j] += gq * hp[j];
                    dh_p[j] += w_row[j] * gq;
                }
            }
        }

        // Token projections. Training always feeds the same sequence to both
        // attention sides.
        for tok in 0..l {
            let src = tokens.token(tok);
            for i in 0..d {
                let gk = dk[tok * d + i];
                let gv = dv[tok * d + i];
                let k_row = &mut grads.w_k[i * h.token_dim..(i + 1) * h.token_dim];
                let v_row = &mut grads.w_v[i * h.token_dim..(i + 1) * h.token_dim];
                for idx in 0..h.token_dim {
                    k_row[idx] += gk * src[idx];
                    v_row[idx] += gv * src[idx];
                }
            }
        }

        // Time and patch paths.
        for p in 0..p_count {
            for i in 0..d {
                du[i] += dh[p * d + i];
            }
        }
        for i in 0..d {
            grads.b_time[i] += du[i];
            let g_row = &mut grads.w_time[i * d..(i + 1) * d];
            for j in 0..d {
                g_row[j] += du[i] * ws.tau[j];
            }
        }
        for p in 0..p_count {
            let patch = &ws.patches[p * patch_in..(p + 1) * patch_in];
            for i in 0..d {
                let g = dh[p * d + i];
                grads.b_patch[i] += g;
                let g_row = &mut grads.w_patch[i * patch_in..(i + 1) * patch_in];
                for j in 0..patch_in {
                    g_row[j] += g * patch[j];
                }
            }
        }

        loss
    }
}

/// Forward-pass activations kept for the backward pass.
struct Workspace {
    patches: Vec<f64>,
    tau: Vec<f64>,
    time_feat: Vec<f64>,
    h: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    scores: Vec<f64>,
    attn: Vec<f64>,
    attn_out: Vec<f64>,
    r: Vec<f64>,
    y: Vec<f64>,
    eps: Vec<f64>,
}

impl Workspace {
    fn new(h: &DenoiserHyper) -> Self {
        let (d, l, p) = (h.attn_dim, h.token_len, h.pixels());
        Self {
            patches: vec![0.0; p * h.patch_in()],
            tau: vec![0.0; d],
            time_feat: vec![0.0; d],
            h: vec![0.0; p * d],
            k: vec![0.0; l * d],
            v: vec![0.0; l * d],
            q: vec![0.0; p * d],
            scores: vec![0.0; p * l],
            attn: vec![0.0; p * l],
            attn_out: vec![0.0; p * d],
            r: vec![0.0; p * d],
            y: vec![0.0; p * h.hidden_dim],
            eps: vec![0.0; h.channels * p],
        }
    }
}

impl Denoiser for DenoiserModel {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.hyper.channels, self.hyper.m, self.hyper.n)
    }

    fn predict(&self, t: usize, x: &LatentGrid, tokens: &TokenSequence) -> Result<DenoiserOutput, EngineError> {
        let (eps, attention) = self.predict_noise(t, x, tokens)?;
        Ok(DenoiserOutput {
            eps,
            attention: vec![attention],
        })
    }
}

/// Training schedule knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Probability of replacing the condition with the null sequence.
    pub cond_dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            cond_dropout_p: 0.1,
            seed: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains the denoising objective: predict the injected noise on a freshly
/// noised sample at a uniform timestep, with conditioning dropout. Returns
/// the trained model and the per-epoch mean loss curve.
pub fn train(
    model: &DenoiserModel,
    dataset: &[(LatentGrid, TokenSequence)],
    null: &TokenSequence,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserModel, Vec<f64>), DenoiserError> {
    if dataset.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&config.cond_dropout_p) {
        return Err(DenoiserError::BadDropout);
    }

    let mut model = model.clone();
    let mut rng = rng::stream(config.seed, 0x74_72);
    let mut moments_m = Params::zeros(&model.hyper);
    let mut moments_v = Params::zeros(&model.hyper);
    let mut grads = Params::zeros(&model.hyper);
    let mut curve = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.max(1);

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            for tensor in grads.tensors_mut() {
                tensor.iter_mut().for_each(|g| *g = 0.0);
            }
            for &idx in batch {
                let (x0, tokens) = &dataset[idx];
                let t = rng.random_range(1..=sched.t_train());
                let eps = LatentGrid::standard_normal(
                    model.hyper.channels,
                    model.hyper.m,
                    model.hyper.n,
                    &mut rng,
                );
                let drop: f64 = rng.random();
                let cond = if drop < config.cond_dropout_p { null } else { tokens };
                let x_t = crate::engine::forward_noise(x0, t, &eps, sched)
                    .expect("dataset grids match the schedule range");
                epoch_loss += model.loss_and_backward(t, &x_t, cond, &eps, Some(&mut grads));
            }

            model.train_steps += 1;
            let step = model.train_steps as i32;
            let scale = 1.0 / batch.len() as f64;
            let bias1 = 1.0 - ADAM_BETA1.powi(step);
            let bias2 = 1.0 - ADAM_BETA2.powi(step);
            let params = model.params.tensors_mut();
            let g_all = grads.tensors();
            let m_all = moments_m.tensors_mut();
            let v_all = moments_v.tensors_mut();
            for (((param, grad), m), v) in params.into_iter().zip(g_all).zip(m_all).zip(v_all) {
                for i in 0..param.len() {
                    let g = grad[i] * scale;
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    param[i] = quantize(param[i] - config.lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
                }
            }
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }

    model.rng_snapshot = snapshot(&rng);
    Ok((model, curve))
}

fn snapshot(rng: &ChaCha12Rng) -> RngSnapshot {
    RngSnapshot {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

/// One labeled probe for gradient checking.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub t: usize,
    pub x_t: LatentGrid,
    pub tokens: TokenSequence,
    pub eps_target: LatentGrid,
}

impl GradSample {
    /// A random sample drawn through the forward process.
    pub fn random(model: &DenoiserModel, tokens: &TokenSequence, sched: &NoiseSchedule, seed: u64) -> Self {
        let h = model.hyper();
        let mut r = rng::stream(seed, 0x67_73);
        let x0 = LatentGrid::standard_normal(h.channels, h.m, h.n, &mut r);
        let eps = LatentGrid::standard_normal(h.channels, h.m, h.n, &mut r);
        let t = r.random_range(1..=sched.t_train());
        let x_t = crate::engine::forward_noise(&x0, t, &eps, sched).expect("matching shapes");
        Self {
            t,
            x_t,
            tokens: tokens.clone(),
            eps_target: eps,
        }
    }
}

/// Central finite-difference step for gradient checking.
const GRAD_CHECK_H: f64 = 1e-4;

/// Compares analytic gradients against central finite differences on
/// `probe_count` randomly chosen parameters. Returns the maximum relative
/// error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(model: &DenoiserModel, sample: &GradSample, probe_count: usize, seed: u64) -> f64 {
    assert!(probe_count >= 1, "probe_count must be at least 1");
    let mut analytic = Params::zeros(&model.hyper);
    model.loss_and_backward(
        sample.t,
        &sample.x_t,
        &sample.tokens,
        &sample.eps_target,
        Some(&mut analytic),
    );

    let mut probe_model = model.clone();
    let mut r = rng::stream(seed, 0x67_63);
    let mut max_rel = 0.0f64;
    for _ in 0..probe_count {
        let tensor_idx = r.random_range(0..11usize);
        let elem_idx = {
            let len = probe_model.params.tensors()[tensor_idx].len();
            r.random_range(0..len)
        };
        let a = analytic.tensors()[tensor_idx][elem_idx];

        let original = probe_model.params.tensors()[tensor_idx][elem_idx];
        probe_model.params.tensors_mut()[tensor_idx][elem_idx] = original + GRAD_CHECK_H;
        let loss_plus = probe_model.loss_and_backward(sample.t, &sample.x_t, &sample.tokens, &sample.eps_target, None);
        probe_model.params.tensors_mut()[tensor_idx][elem_idx] = original - GRAD_CHECK_H;
        let loss_minus = probe_model.loss_and_backward(sample.t, &sample.x_t, &sample.tokens, &sample.eps_target, None);
        probe_model.params.tensors_mut()[tensor_idx][elem_idx] = original;

        let numeric = (loss_plus - loss_minus) / (2.0 * GRAD_CHECK_H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
