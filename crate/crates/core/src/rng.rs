//! Deterministic random number streams.
//!
//! Every source of randomness in the crate draws from a ChaCha stream keyed
//! by a user seed plus a named purpose, so reordering one consumer never
//! shifts the values another one sees. The name is folded into the key with
//! a fixed 64-bit mix instead of a hasher whose output could change between
//! library releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-period and well dispersed for sequential keys.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit digest of a stream name.
fn digest(name: &str) -> u64 {
    let mut h = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &b in name.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// Named substream of a master seed. Equal (seed, name) pairs always yield
/// identical streams; distinct names decorrelate them.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ digest(name)))
}

/// Named substream further split by an index (per scene, per epoch, ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ digest(name)) ^ index))
}
