//! Deterministic per-cell seed derivation.

/// Mixes a master seed with a cell coordinate so every (problem, repetition)
/// cell gets an independent, order-free seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut x = splitmix(master ^ 0x5851_F42D_4C95_7F2D);
    x = splitmix(x ^ a);
    splitmix(x ^ b.rotate_left(32))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
