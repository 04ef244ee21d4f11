//! Persona-aware variational response generation.
//!
//! The crate contains a small reverse-mode autodiff engine, the recurrent
//! encoder/decoder family (S2SA, fact-bias, speaker, VAE, CVAE and the
//! persona-aware generator), its training objective, an Adam trainer,
//! beam-search generation, and the persona metrics (uRank, uPPL, uDistinct)
//! alongside BLEU-1 and embedding similarity.

pub mod autodiff;
pub mod corpus;
pub mod generation;
pub mod model;
pub mod objective;
pub mod trainer;
pub mod metrics;
pub mod cli;

/// Derives an independent 64-bit seed for position `index` of random stream
/// `stream`, so nearby indices give unrelated generators.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
