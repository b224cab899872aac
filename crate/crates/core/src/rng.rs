//! Counter-based randomness.
//!
//! Every random value is a pure function of `(seed, counter)`, so results do
//! not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 random bits for position `counter` of stream `seed`.
#[inline]
pub fn hash_u64(seed: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Uniform sample in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn hash_unit(seed: u64, counter: u64) -> f64 {
    (hash_u64(seed, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sample (Box-Muller over two counter positions).
pub fn hash_normal(seed: u64, counter: u64) -> f64 {
    let u1 = hash_unit(seed, counter.wrapping_mul(2));
    let u2 = hash_unit(seed, counter.wrapping_mul(2).wrapping_add(1));
    let u1 = u1.max(f64::MIN_POSITIVE);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Derives an independent named sub-stream from a root seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(splitmix64(seed ^ 0x5EED), |acc, b| splitmix64(acc ^ b as u64))
}

/// Mixes a seed with an index, e.g. a layer number or batch index.
pub fn mix(seed: u64, index: u64) -> u64 {
    hash_u64(seed, index.wrapping_add(0xA5A5_A5A5))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
