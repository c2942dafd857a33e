//! Blockwise sparse multi-head attention, a small masked-language-model
//! encoder built on it, and a memory/FLOPs cost toolkit.
//!
//! The central object is an attention layer whose N x N score matrix is
//! restricted to a block permutation pattern: the sequence is split into n
//! blocks and query block i attends only to key block pi(i). This cuts the
//! quadratic score memory and FLOPs by a factor of n while keeping dense
//! matrix kernels, and different heads can use different permutations to mix
//! short- and long-range context.

pub mod attention;
pub mod cost;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod train;
pub mod track;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
