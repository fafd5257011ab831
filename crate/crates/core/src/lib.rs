//! Differentially private synthesis of tabular data with a small causal
//! language model trained in two stages.

pub mod checkpoint;
pub mod codec;
pub mod dpsgd;
pub mod eval;
pub mod losses;
pub mod model;
pub mod privacy;
pub mod sampler;
pub mod schema;
pub mod tokenizer;
pub mod trainer;

/// Mixes `stream` into `base` so that sub-tasks of one seeded run draw from
/// unrelated generators.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
