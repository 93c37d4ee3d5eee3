//! Core library for distilling a frozen diffusion teacher into a
//! deterministic multi-scale visual backbone, fusing it with language, and
//! driving a chunked imitation policy on a synthetic manipulation
//! environment.
//!
//! Module map:
//! - [`tensor`]: f64 tensor ops with reverse-mode autodiff (fixed reduction
//!   order, bitwise-reproducible on CPU).
//! - [`nn`]: parameter stores, initializers, Adam.
//! - [`latent`]: image-to-latent codec, noise schedule, closed-form noising.
//! - [`unet`]: the shared time-conditional U-Net backbone with decoder taps.
//! - [`teacher`]: frozen teacher wrapper, denoising pretraining, fingerprints.
//! - [`student`]: clean-latent student plus the spatial-semantic pyramid.
//! - [`lang`]: frozen text stub, 2D rotary embedding, cross-attention fusion.
//! - [`distill`]: projection heads, cosine alignment, annealing, train loop.
//! - [`policy`]: chunked action head and receding-horizon rollout.
//! - [`synth`]: scene generator, rasterizer, scripted expert, toy env,
//!   dataset and correspondence-pair plumbing.
//! - [`checkpoint`]: versioned tensor container shared by every artifact.
//! - [`config`]: run configuration file format.
//! - [`pck`]: nearest-neighbor correspondence probing.

pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod lang;
pub mod latent;
pub mod nn;
pub mod pck;
pub mod policy;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
