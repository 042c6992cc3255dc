//! Prompt grammar, frozen autoregressive encoder, and token surgery.
//!
//! Prompts follow the template "a {attribute} {noun}" over a small fixed
//! vocabulary. A frozen (seeded, never trained) encoder turns a prompt into a
//! fixed-length sequence of embeddings with per-token class tags: one `[SOS]`
//! token, the semantic word tokens, and `[EOS]` padding. The `[EOS]` vector is
//! the terminal state of a causal recurrence scanned over `[SOS]` plus the
//! semantic tokens, so it summarizes the whole prompt. Surgeries rewrite a
//! sequence (swap `[EOS]`, zero or randomize a class, repeat the semantic
//! block, ...) without touching the input.

pub mod render;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng;

/// Nouns, rendered as glyph outlines.
pub const NOUNS: [&str; 8] = [
    "circle", "square", "triangle", "cross", "star", "ring", "bar", "diamond",
];
/// Color attributes, rendered as solid fills.
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
/// Texture attributes, rendered as fill patterns.
pub const TEXTURES: [&str; 4] = ["striped", "checkered", "dotted", "speckled"];

/// The shared leading article of every prompt.
pub const ARTICLE: &str = "a";

pub const N_NOUNS: usize = NOUNS.len();
pub const N_COLORS: usize = COLORS.len();
pub const N_TEXTURES: usize = TEXTURES.len();
/// Total distinct prompts: every (noun, attribute) pair.
pub const N_PROMPTS: usize = N_NOUNS * (N_COLORS + N_TEXTURES);

/// Number of semantic word tokens per prompt ("a", attribute, noun).
pub const SEM_WORDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeKind {
    Color,
    Texture,
}

impl AttributeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeKind::Color => "color",
            AttributeKind::Texture => "texture",
        }
    }
}

/// One prompt: a noun plus a color or texture attribute.
///
/// `attribute_id` indexes into [`COLORS`] or [`TEXTURES`] according to `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub noun_id: usize,
    pub attribute_id: usize,
    pub kind: AttributeKind,
}

impl PromptSpec {
    pub fn new(noun_id: usize, attribute_id: usize, kind: AttributeKind) -> Result<Self, PromptError> {
        let n_attrs = match kind {
            AttributeKind::Color => N_COLORS,
            AttributeKind::Texture => N_TEXTURES,
        };
        if noun_id >= N_NOUNS || attribute_id >= n_attrs {
            return Err(PromptError::VocabularyOutOfRange);
        }
        Ok(Self {
            noun_id,
            attribute_id,
            kind,
        })
    }

    pub fn noun_word(&self) -> &'static str {
        NOUNS[self.noun_id]
    }

    pub fn attribute_word(&self) -> &'static str {
        match self.kind {
            AttributeKind::Color => COLORS[self.attribute_id],
            AttributeKind::Texture => TEXTURES[self.attribute_id],
        }
    }

    /// Index into the flat word-embedding table.
    fn word_ids(&self) -> [usize; SEM_WORDS] {
        let attr = match self.kind {
            AttributeKind::Color => 1 + N_NOUNS + self.attribute_id,
            AttributeKind::Texture => 1 + N_NOUNS + N_COLORS + self.attribute_id,
        };
        [0, attr, 1 + self.noun_id]
    }

    /// Enumerates every prompt in a fixed (noun-major, colors before
    /// textures) order.
    pub fn all() -> Vec<PromptSpec> {
        let mut out = Vec::with_capacity(N_PROMPTS);
        for noun_id in 0..N_NOUNS {
            for attribute_id in 0..N_COLORS {
                out.push(PromptSpec {
                    noun_id,
                    attribute_id,
                    kind: AttributeKind::Color,
                });
            }
            for attribute_id in 0..N_TEXTURES {
                out.push(PromptSpec {
                    noun_id,
                    attribute_id,
                    kind: AttributeKind::Texture,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptError {
    VocabularyOutOfRange,
    /// More prompts requested than distinct combinations exist.
    CapacityExceeded,
    /// Sequence parts with inconsistent lengths or an invalid tag layout.
    BadSequenceLayout,
    /// `SWITCH_EOS` needs a second sequence carrying the donor `[EOS]`.
    MissingSwitchDonor,
    /// The donor sequence has no `[EOS]` position.
    DonorHasNoEos,
    /// The repeated semantic block does not fit the sequence length.
    RepeatCapacityExceeded,
    /// Surgery target class must be SEM or EOS.
    BadTargetClass,
    /// Two distinct prompts encoded to identical `[EOS]` vectors.
    EosCollision,
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptError::VocabularyOutOfRange => write!(f, "id outside vocabulary bounds"),
            PromptError::CapacityExceeded => write!(f, "requested more prompts than distinct combinations"),
            PromptError::BadSequenceLayout => write!(f, "inconsistent token sequence layout"),
            PromptError::MissingSwitchDonor => write!(f, "EOS switch requires a donor sequence"),
            PromptError::DonorHasNoEos => write!(f, "donor sequence has no EOS position"),
            PromptError::RepeatCapacityExceeded => write!(f, "repeated semantic block exceeds sequence length"),
            PromptError::BadTargetClass => write!(f, "surgery target class must be SEM or EOS"),
            PromptError::EosCollision => write!(f, "encoder is not injective: EOS vectors collide"),
        }
    }
}

impl core::error::Error for PromptError {}

/// Token class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenTag {
    Sos,
    Sem,
    Eos,
}

/// Which attention inputs a surgically altered sequence feeds.
///
/// With `KeyOnly` the altered tokens enter only the key projection and the
/// untouched companion supplies the values; `ValueOnly` is the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KvScope {
    #[default]
    Both,
    KeyOnly,
    ValueOnly,
}

/// Fixed-length sequence of token embeddings with class tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    dim: usize,
    tokens: Vec<f64>, // L * dim, token-major
    tags: Vec<TokenTag>,
    provenance: Option<PromptSpec>,
    kv_scope: KvScope,
    /// Untouched original carried along when `kv_scope != Both`.
    kv_companion: Option<Box<TokenSequence>>,
}

impl TokenSequence {
    pub fn from_parts(
        dim: usize,
        tokens: Vec<f64>,
        tags: Vec<TokenTag>,
        provenance: Option<PromptSpec>,
    ) -> Result<Self, PromptError> {
        if dim == 0 || tags.is_empty() || tokens.len() != dim * tags.len() {
            return Err(PromptError::BadSequenceLayout);
        }
        Ok(Self {
            dim,
            tokens,
            tags,
            provenance,
            kv_scope: KvScope::Both,
            kv_companion: None,
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, l: usize) -> &[f64] {
        &self.tokens[l * self.dim..(l + 1) * self.dim]
    }

    pub fn tokens_flat(&self) -> &[f64] {
        &self.tokens
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    pub fn provenance(&self) -> Option<&PromptSpec> {
        self.provenance.as_ref()
    }

    pub fn kv_scope(&self) -> KvScope {
        self.kv_scope
    }

    pub fn kv_companion(&self) -> Option<&TokenSequence> {
        self.kv_companion.as_deref()
    }

    fn positions_of(&self, tag: TokenTag) -> impl Iterator<Item = usize> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(move |(_, t)| **t == tag)
            .map(|(l, _)| l)
    }

    fn set_token(&mut self, l: usize, value: &[f64]) {
        self.tokens[l * self.dim..(l + 1) * self.dim].copy_from_slice(value);
    }
}

/// Frozen prompt encoder.
///
/// Word embeddings, the `[SOS]` vector, and the recurrence matrices `A`, `B`
/// are drawn once from a seeded generator and never change. The `[EOS]`
/// embedding is the terminal state of `h <- tanh(A h + B e)` scanned over
/// `[SOS]` followed by the semantic words; all padding positions share it.
/// Construction verifies that every distinct prompt yields a distinct `[EOS]`
/// vector.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    dim: usize,
    seq_len: usize,
    sos: Vec<f64>,
    words: Vec<f64>, // (1 + nouns + colors + textures) * dim
    rec_a: Vec<f64>, // dim x dim
    rec_b: Vec<f64>, // dim x dim
}

/// Default embedding dimension.
pub const TOKEN_DIM: usize = 16;
/// Default sequence length.
pub const SEQ_LEN: usize = 8;

const N_WORDS: usize = 1 + N_NOUNS + N_COLORS + N_TEXTURES;

impl PromptEncoder {
    pub fn new(dim: usize, seq_len: usize, seed: u64) -> Result<Self, PromptError> {
        if dim == 0 || seq_len < 1 + SEM_WORDS + 1 {
            return Err(PromptError::BadSequenceLayout);
        }
        let mut r = rng::stream(seed, 0x70_65);
        let mut uniform = |count: usize, scale: f64| -> Vec<f64> {
            (0..count)
                .map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale)
                .collect()
        };
        let sos = uniform(dim, 1.0);
        let words = uniform(N_WORDS * dim, 1.0);
        let rec_a = uniform(dim * dim, 0.5);
        let rec_b = uniform(dim * dim, 0.5);
        let enc = Self {
            dim,
            seq_len,
            sos,
            words,
            rec_a,
            rec_b,
        };
        enc.verify_injective()?;
        Ok(enc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn word(&self, id: usize) -> &[f64] {
        &self.words[id * self.dim..(id + 1) * self.dim]
    }

    /// One recurrence step: `h <- tanh(A h + B e)`.
    fn scan_step(&self, h: &mut [f64], e: &[f64]) {
        let d = self.dim;
        let mut next = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.rec_a[i * d + j] * h[j] + self.rec_b[i * d + j] * e[j];
            }
            next[i] = acc.tanh();
        }
        h.copy_from_slice(&next);
    }

    fn terminal_state(&self, sem_word_ids: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        self.scan_step(&mut h, &self.sos.clone());
        for &id in sem_word_ids {
            self.scan_step(&mut h, &self.word(id).to_vec());
        }
        h
    }

    /// Encodes one prompt into its token sequence.
    pub fn encode_prompt(&self, p: &PromptSpec) -> TokenSequence {
        let word_ids = p.word_ids();
        let eos = self.terminal_state(&word_ids);
        let mut tokens = Vec::with_capacity(self.seq_len * self.dim);
        let mut tags = Vec::with_capacity(self.seq_len);
        tokens.extend_from_slice(&self.sos);
        tags.push(TokenTag::Sos);
        for &id in &word_ids {
            tokens.extend_from_slice(self.word(id));
            tags.push(TokenTag::Sem);
        }
        while tags.len() < self.seq_len {
            tokens.extend_from_slice(&eos);
            tags.push(TokenTag::Eos);
        }
        TokenSequence {
            dim: self.dim,
            tokens,
            tags,
            provenance: Some(*p),
            kv_scope: KvScope::Both,
            kv_companion: None,
        }
    }

    /// The null condition: the encoding of the empty prompt, `[SOS]` followed
    /// by the empty-scan `[EOS]` in every remaining position. This one value
    /// serves both conditioning dropout during training and the unconditional
    /// branch of guided sampling.
    pub fn null_condition(&self) -> TokenSequence {
        let eos = self.terminal_state(&[]);
        let mut tokens = Vec::with_capacity(self.seq_len * self.dim);
        let mut tags = Vec::with_capacity(self.seq_len);
        tokens.extend_from_slice(&self.sos);
        tags.push(TokenTag::Sos);
        while tags.len() < self.seq_len {
            tokens.extend_from_slice(&eos);
            tags.push(TokenTag::Eos);
        }
        TokenSequence {
            dim: self.dim,
            tokens,
            tags,
            provenance: None,
            kv_scope: KvScope::Both,
            kv_companion: None,
        }
    }

    fn verify_injective(&self) -> Result<(), PromptError> {
        let prompts = PromptSpec::all();
        let vectors: Vec<Vec<f64>> = prompts.iter().map(|p| self.terminal_state(&p.word_ids())).collect();
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let dist2: f64 = vectors[i]
                    .iter()
                    .zip(&vectors[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist2 <= 0.0 {
                    return Err(PromptError::EosCollision);
                }
            }
        }
        Ok(())
    }
}

/// Deterministically samples `count` distinct prompts without replacement,
/// alternating between the color and texture pools so the two attribute
/// kinds stay balanced (within one) while both pools last.
pub fn build_promptset(count: usize, seed: u64) -> Result<Vec<PromptSpec>, PromptError> {
    if count > N_PROMPTS {
        return Err(PromptError::CapacityExceeded);
    }
    let mut colors = Vec::with_capacity(N_NOUNS * N_COLORS);
    let mut textures = Vec::with_capacity(N_NOUNS * N_TEXTURES);
    for p in PromptSpec::all() {
        match p.kind {
            AttributeKind::Color => colors.push(p),
            AttributeKind::Texture => textures.push(p),
        }
    }
    let mut r = rng::stream(seed, 0x70_73);
    shuffle(&mut colors, &mut r);
    shuffle(&mut textures, &mut r);

    let mut out = Vec::with_capacity(count);
    let (mut ci, mut ti) = (0, 0);
    while out.len() < count {
        let want_color = out.len() % 2 == 0;
        if want_color && ci < colors.len() || ti >= textures.len() {
            out.push(colors[ci]);
            ci += 1;
        } else {
            out.push(textures[ti]);
            ti += 1;
        }
    }
    Ok(out)
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// The token surgeries of the conditioning probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurgeryKind {
    /// Replace every `[EOS]` position of A with B's `[EOS]` vector.
    SwitchEos,
    /// Overwrite every token of the target class with zeros.
    ZeroClass(TokenTag),
    /// Overwrite every token of the target class with seeded unit-variance
    /// Gaussian vectors.
    RandomClass(TokenTag),
    /// Fill all positions with the `[SOS]` vector.
    SosOnly,
    /// Keep `[SOS]`, fill the rest with the `[EOS]` vector.
    EosOnly,
    /// Tile the semantic block `repeat` times, shrinking the `[EOS]` padding.
    RepeatSem(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurgerySpec {
    pub kind: SurgeryKind,
    pub kv_scope: KvScope,
    /// Seed for `RandomClass` draws.
    pub seed: u64,
}

impl SurgerySpec {
    pub fn new(kind: SurgeryKind) -> Self {
        Self {
            kind,
            kv_scope: KvScope::Both,
            seed: 0,
        }
    }

    pub fn with_kv_scope(mut self, scope: KvScope) -> Self {
        self.kv_scope = scope;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Applies a surgery to `seq_a`, returning a new sequence. `seq_b` supplies
/// the donor `[EOS]` for [`SurgeryKind::SwitchEos`] and is ignored otherwise.
/// Inputs are never mutated. When the spec narrows `kv_scope`, the untouched
/// original rides along as the companion for the unaltered attention input.
pub fn apply_surgery(
    seq_a: &TokenSequence,
    seq_b: Option<&TokenSequence>,
    spec: &SurgerySpec,
) -> Result<TokenSequence, PromptError> {
    let mut out = TokenSequence {
        dim: seq_a.dim,
        tokens: seq_a.tokens.clone(),
        tags: seq_a.tags.clone(),
        provenance: seq_a.provenance,
        kv_scope: KvScope::Both,
        kv_companion: None,
    };

    match spec.kind {
        SurgeryKind::SwitchEos => {
            let donor = seq_b.ok_or(PromptError::MissingSwitchDonor)?;
            let donor_eos_pos = donor
                .positions_of(TokenTag::Eos)
                .next()
                .ok_or(PromptError::DonorHasNoEos)?;
            let donor_eos = donor.token(donor_eos_pos).to_vec();
            let targets: Vec<usize> = out.positions_of(TokenTag::Eos).collect();
            for l in targets {
                out.set_token(l, &donor_eos);
            }
        }
        SurgeryKind::ZeroClass(class) | SurgeryKind::RandomClass(class) => {
            if class == TokenTag::Sos {
                return Err(PromptError::BadTargetClass);
            }
            let targets: Vec<usize> = out.positions_of(class).collect();
            match spec.kind {
                SurgeryKind::ZeroClass(_) => {
                    for l in targets {
                        out.set_token(l, &vec![0.0; out.dim]);
                    }
                }
                _ => {
                    let mut r = rng::stream(spec.seed, 0x73_75);
                    for l in targets {
                        let v: Vec<f64> = (0..out.dim).map(|_| r.sample(StandardNormal)).collect();
                        out.set_token(l, &v);
                    }
                }
            }
        }
        SurgeryKind::SosOnly => {
            let sos = out.token(0).to_vec();
            for l in 0..out.len() {
                out.set_token(l, &sos);
                out.tags[l] = TokenTag::Sos;
            }
        }
        SurgeryKind::EosOnly => {
            let eos_pos = seq_a
                .positions_of(TokenTag::Eos)
                .next()
                .ok_or(PromptError::DonorHasNoEos)?;
            let eos = seq_a.token(eos_pos).to_vec();
            for l in 1..out.len() {
                out.set_token(l, &eos);
                out.tags[l] = TokenTag::Eos;
            }
        }
        SurgeryKind::RepeatSem(repeat) => {
            let sem: Vec<usize> = seq_a.positions_of(TokenTag::Sem).collect();
            let tiled = repeat * sem.len();
            if repeat == 0 || 1 + tiled > seq_a.len() {
                return Err(PromptError::RepeatCapacityExceeded);
            }
            let eos_pos = seq_a
                .positions_of(TokenTag::Eos)
                .next()
                .ok_or(PromptError::DonorHasNoEos)?;
            let eos = seq_a.token(eos_pos).to_vec();
            let mut cursor = 1;
            for rep in 0..repeat {
                for &src in &sem {
                    let _ = rep;
                    let v = seq_a.token(src).to_vec();
                    out.set_token(cursor, &v);
                    out.tags[cursor] = TokenTag::Sem;
                    cursor += 1;
                }
            }
            while cursor < out.len() {
                out.set_token(cursor, &eos);
                out.tags[cursor] = TokenTag::Eos;
                cursor += 1;
            }
        }
    }

    if spec.kv_scope != KvScope::Both {
        out.kv_scope = spec.kv_scope;
        out.kv_companion = Some(Box::new(seq_a.clone()));
    }
    Ok(out)
}
