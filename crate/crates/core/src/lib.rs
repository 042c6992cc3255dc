//! Algorithmic core of the guidance laboratory.
//!
//! Everything in this crate is pure computation over owned buffers: the
//! diffusion engine (schedules, DDIM stepping, classifier-free guidance and
//! its staged variant), 2D spectral analysis, the prompt grammar with its
//! frozen encoder and token surgeries, the trainable toy denoiser, and the
//! measurement probes. File formats, persistence and the CLI live in the
//! `lab-cli` companion crate.
//!
//! The crate is `no_std` (with `alloc`) so the numeric core stays free of
//! incidental IO.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod grid;
pub mod probes;
pub mod prompt;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod denoiser;

pub use grid::LatentGrid;
pub use schedule::NoiseSchedule;
