//! Joint masked-image and caption generative pre-training for vision
//! transformers, built on a small reverse-mode autograd engine.
//!
//! A masked-patch encoder produces a visual latent that feeds two decoders:
//! one reconstructs the masked pixels, the other generates the caption
//! autoregressively through cross-attention. The training objective is the
//! weighted sum `λ_V·L_V + λ_L·L_L` of the two losses.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vision;

pub use error::{MugError, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Real, Tensor};
