//! SyncFlow: joint text-to-audio-video generation at desk scale.
//!
//! The model is a dual-tower diffusion transformer trained with rectified
//! flow matching. A video tower with factorized spatial/temporal attention
//! generates video latents; an audio tower generates audio latents while
//! cross-attending, layer by layer, to adapted features exported by the
//! video tower. Training follows a three-stage protocol (video pretraining,
//! audio adaptation with the video tower frozen, joint fine-tuning), and
//! sampling integrates the learned velocity field with an Euler ODE solver
//! under classifier-free guidance.
//!
//! Everything runs on a small self-contained tensor engine with
//! reverse-mode differentiation; no external ML framework is involved.

pub mod codec;
pub mod ddit;
pub mod error;
pub mod eval;
pub mod io;
pub mod numerics;
pub mod rfm;
pub mod synthdata;
pub mod text;
pub mod training;

pub use error::{Error, Result};
