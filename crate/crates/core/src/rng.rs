//! Counter-based random streams.
//!
//! Every random draw in the pipeline comes from a generator keyed by the
//! experiment seed plus a tuple of counters (epoch, sample index, ...), so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a label, used to give named streams distinct keys.
pub fn label_key(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Derives a 64-bit key from a seed and a sequence of counters.
pub fn derive_key(seed: u64, counters: &[u64]) -> u64 {
    counters.iter().fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c)))
}

/// Independent generator for the stream `(seed, counters...)`.
pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, counters))
}
