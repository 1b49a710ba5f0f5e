//! Seeded random streams.
//!
//! Every random consumer draws from a ChaCha8 stream whose key is derived
//! from a 64-bit run seed and a path of labels, e.g. `("patient", 17)` or
//! `("candidate", 3)`. Streams are addressed, never shared, so the order in
//! which tasks execute cannot change any result.
//!
//! Derivation: the key is four SplitMix64 outputs of a state obtained by
//! folding each label (FNV-1a of the tag, then the index) into the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Deterministic stream for `seed` refined by a sequence of `(tag, index)` labels.
pub fn substream(seed: u64, path: &[(&str, u64)]) -> Rng {
    let mut state = seed;
    for (tag, index) in path {
        state ^= fnv1a(tag);
        splitmix(&mut state);
        state ^= *index;
        splitmix(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    Rng::from_seed(key)
}

/// Convenience for a single-label stream.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    substream(seed, &[(tag, index)])
}

/// Seeded 64-bit hash of a word sequence (stable across platforms and toolchains).
pub fn hash_words(seed: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    let mut state = seed;
    splitmix(&mut state);
    for w in words {
        state ^= w;
        splitmix(&mut state);
    }
    splitmix(&mut state)
}

/// Fresh 64-bit seed drawn from a parent stream (for handing to sub-tasks).
pub fn child_seed(rng: &mut Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
