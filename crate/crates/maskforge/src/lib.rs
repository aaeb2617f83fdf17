//! Multi-concept unlearning on a toy conditional diffusion model.
//!
//! A small conditional MLP denoiser is pretrained on a 2-D hierarchical
//! Gaussian-mixture concept universe, then individual concepts are forgotten
//! sequentially by combining a dynamic gradient mask (periodic drop/add of
//! active gradient positions under a cosine-decayed update ratio) with a
//! three-term loss: the unlearning term steers the forgotten condition toward
//! its superclass, an alignment term keeps the superclass behaviour intact,
//! and a teacher-distillation term keeps previously forgotten concepts
//! forgotten. The known mixture geometry gives a closed-form Bayes classifier
//! that serves as the evaluation oracle.

pub mod checkpoint;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod unlearning;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
