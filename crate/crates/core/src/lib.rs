//! Adversarial steganography laboratory.
//!
//! Three networks play a game: a generator hides a bit string in a cover
//! image, a discriminator recovers it (and judges real versus generated), and
//! a steganalyzer tries to tell covers from stego images. Classical LSB ±1
//! and cost-driven adaptive embedding serve as baselines.

pub mod data;
pub mod game;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod stego;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Pgm(#[from] data::PgmError),
    #[error(transparent)]
    Stego(#[from] stego::StegoError),
    #[error(transparent)]
    Checkpoint(#[from] nets::CheckpointError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
