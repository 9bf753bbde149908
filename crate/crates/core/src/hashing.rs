//! Platform-stable integer hashing used for seeding and pseudo-embeddings.

use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// SplitMix64 finalizer. Good avalanche, no floating point.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a base seed with a counter into an independent stream seed.
pub fn derive_seed(base: u64, counter: u64) -> u64 {
    splitmix64(base ^ splitmix64(counter.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Maps the top 24 bits of `bits` to a value in `[-1, 1]` that is exactly
/// representable as `f32`.
pub fn unit_interval_f32(bits: u64) -> f32 {
    let k = (bits >> 40) as u32; // 24 bits
    (k as f32 / ((1u32 << 23) as f32)) - 1.0
}

/// FNV-1a over the bit patterns of a float slice.
pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
