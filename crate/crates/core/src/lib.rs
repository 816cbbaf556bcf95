//! Desk-scale audio-driven talking-avatar video diffusion.
//!
//! The crate implements the conditioning stack of an audio-driven avatar
//! generator on top of a small multimodal diffusion transformer:
//!
//! - [`latentio`]: an exactly invertible packing VAE, face-mask alignment and
//!   the `.avdt` tensor container.
//! - [`rope`]: 3D rotary positions, including the shifted identity frame.
//! - [`injection`]: the three character-image injection mechanisms.
//! - [`audio`]: filterbank audio features, temporal alignment and the
//!   face-aware audio adapter.
//! - [`emotion`]: the emotion-reference cross-attention module.
//! - [`backbone`]: the dual-stream / single-stream velocity network.
//! - [`flow`]: flow-matching objectives and the training loop.
//! - [`fusion`]: time-aware position-shift fusion for long timelines.
//! - [`cli`]: dataset synthesis, training, inference, ablation and evaluation
//!   commands shared by the `avatar` binary and the examples.

pub mod audio;
pub mod backbone;
pub mod cli;
pub mod emotion;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod injection;
pub mod latentio;
pub mod numcore;
pub mod rope;

pub use error::{Error, Result};
