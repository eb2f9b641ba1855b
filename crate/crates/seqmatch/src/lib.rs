//! Neural text-matching engine for multi-turn response selection.
//!
//! The crate builds everything from an in-house f64 tensor tape: two
//! utterance-response matchers (a convolutional one and an attention one),
//! a matching-accumulation GRU with three prediction heads, Adam training
//! with early stopping, ranking metrics, and a tf-idf retrieval module with
//! keyword message expansion. The `seqmatch` CLI in this workspace drives
//! the full pipeline.

mod binfmt;

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use binfmt::atomic_write;
pub use error::{Error, Result};

/// The deterministic RNG used for initialization and shuffling.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
