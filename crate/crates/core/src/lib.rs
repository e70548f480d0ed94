//! Two-stage surgical phase recognition.
//!
//! Stage 1 fine-tunes an image encoder against learnable per-phase prompts
//! fed through a frozen text encoder ([`prompt`], [`encoder`], [`stage1`]).
//! Stage 2 trains a causal dilated temporal convolutional network on the
//! cached frame features ([`tcn`]). [`eval`] implements phase-wise,
//! video-wise scoring and timeline rendering.

pub mod archive;
pub mod autograd;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod features;
pub mod imaging;
pub mod optim;
pub mod params;
pub mod predictions;
pub mod prompt;
pub mod seed;
pub mod stage1;
pub mod tcn;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
