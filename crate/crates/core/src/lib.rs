//! Vector-quantized item codes for transferable sequential recommendation.
//!
//! Items are described by text embeddings, quantized by optimized product
//! quantization into short discrete codes, and represented by pooling rows of
//! a learned code embedding table. A causal self-attentive encoder is
//! pre-trained contrastively on several domains and then transferred to a new
//! domain by learning a relaxed permutation between the new domain's codes and
//! the pre-trained embedding rows, followed by fine-tuning of the table.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod itemrep;
pub mod model;
pub mod optim;
mod parallel;
pub mod pretrain;
pub mod quantizer;
pub mod seqencoder;
pub mod transfer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout for reproducible, platform-independent streams.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
