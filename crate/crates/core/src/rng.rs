//! Seed derivation shared by every stochastic stage.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// First word of ChaCha stream `stream` keyed by `seed`. Distinct streams give
/// statistically independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
