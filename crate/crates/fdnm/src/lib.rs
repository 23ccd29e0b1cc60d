//! Frequency-domain nuances mining for cross-modality retrieval.
//!
//! The crate decomposes feature maps into Fourier amplitude and phase,
//! lets a gating module steer phase learning with pooled amplitude cues,
//! mines amplitude nuances through a dual-branch module with a center-guided
//! hinge loss, and trains a small two-stream network end to end on a synthetic
//! two-modality identity dataset. Everything runs on a self-contained dense
//! tensor engine with reverse-mode gradients.
//!
//! Start from the `examples/` directory for runnable entry points; the `fdnm`
//! binary exposes the same capabilities as subcommands.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
