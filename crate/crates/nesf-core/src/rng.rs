//! Deterministic RNG streams derived from one experiment seed.
//!
//! Every stochastic choice draws from a stream keyed by (seed, domain, index).
//! Streams are pure functions of the key, so a resumed run at step `s` replays
//! exactly the draws an uninterrupted run would have made at that step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag separating independent streams under one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    FieldInit = 1,
    EncoderInit = 2,
    GammaInit = 3,
    RgbInit = 4,
    PrototypeInit = 5,
    ViewChoice = 6,
    PixelChoice = 7,
    Stratified = 8,
    CeNoise = 9,
    DecoderInit = 10,
    DecoderIter = 11,
    SceneGen = 12,
    Trajectory = 13,
    Query = 14,
    RefinePixels = 15,
    Probe = 16,
}

/// Stream for (seed, domain, index); `index` is usually a step or view id.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ (domain as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        // splitmix64 expansion of the key into the ChaCha seed block.
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(out)
}
