//! Character-consistent latent diffusion conditioning at desk scale.
//!
//! Reference characters are encoded by frozen toy encoders, fused per slot by a
//! positional-aware perceiver resampler into an image-prompt token matrix, and
//! injected into a small latent U-Net through decoupled cross-attention with
//! LoRA deltas. Training adds a masked attention-region loss and a zero-init
//! pose branch.

pub mod checkpoint;
pub mod error;
pub mod nn;
pub mod params;
pub mod synthdata;
pub mod encoders;
pub mod ppr;
pub mod attention;
pub mod backbone;
pub mod losses;
pub mod optim;
pub mod pretrain;
pub mod story;
pub mod trainer;
pub mod eval;

pub use error::{Error, Result};
