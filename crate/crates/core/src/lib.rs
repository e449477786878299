//! Joint video-audio diffusion toolkit.
//!
//! A velocity-parameterized joint denoiser over paired video `(F, C_v, H, W)`
//! and audio `(T, C_a)` tensors, deterministic DDIM sampling with
//! reconstruction guidance for bidirectional conditional generation,
//! contrastive training against augmentation-built negatives, and the
//! evaluation metrics used to judge generated pairs.

pub mod audio;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod fusion;
pub mod matching;
pub mod metrics;
pub mod negatives;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod toynet;
pub mod trainer;

pub use error::{Error, Result};
