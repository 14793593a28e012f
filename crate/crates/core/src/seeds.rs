use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed and a stream index into an independent seed
/// (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
