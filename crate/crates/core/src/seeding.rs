//! Stable seed derivation for order-independent parallel generation.
//!
//! The hash is a fixed splitmix64 chain so the same (master seed, image id,
//! ...) always yields the same stream seed on every platform and in every
//! process layout. Do not swap in `std::hash` here: its output is not
//! guaranteed stable across releases.

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from the master seed and a path of identifiers
/// (image id, family discriminant, ordinal, ...).
pub fn derive_seed(master_seed: u64, path: &[u64]) -> u64 {
    let mut h = mix64(master_seed ^ 0x9E37_79B9_7F4A_7C15);
    for &part in path {
        h = mix64(h ^ mix64(part.wrapping_add(0x2545_F491_4F6C_DD1D)));
    }
    h
}
