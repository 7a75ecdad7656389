//! Namespaced seed derivation.
//!
//! Every random decision in the pipeline draws from a seed derived as
//! `derive(base, tag, index)`. Tags partition the seed space so that e.g.
//! training-data streams and evaluation streams can never collide even when
//! they share a base seed.

/// Derive a child seed from `base` under a string namespace and an index.
///
/// FNV-1a over the tag bytes folded with the base and index, finished with
/// splitmix64. Stable across platforms.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= base;
    h = h.wrapping_mul(FNV_PRIME);
    h ^= index;
    h = h.wrapping_mul(FNV_PRIME);
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
