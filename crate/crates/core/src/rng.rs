//! Keyed random streams.
//!
//! Every random draw in an experiment comes from a ChaCha8 stream whose key is
//! derived from `(seed, index, purpose)`. Streams never depend on the order in
//! which work is scheduled, so results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct tags give independent streams for the
/// same `(seed, index)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    TruthField = 1,
    InitialField = 2,
    ObsPerturbation = 3,
    Resample = 4,
    ExperimentSeed = 5,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key components into a 256-bit ChaCha key.
fn derive_key(seed: u64, index: u64, purpose: Purpose) -> [u8; 32] {
    let mut state = seed;
    let a = splitmix64(&mut state);
    state ^= index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let b = splitmix64(&mut state);
    state ^= (purpose as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    key
}

pub fn stream(seed: u64, index: u64, purpose: Purpose) -> StreamRng {
    ChaCha8Rng::from_seed(derive_key(seed, index, purpose))
}

/// Derives a child seed, e.g. an experiment seed from a plan's base seed.
pub fn child_seed(seed: u64, index: u64, purpose: Purpose) -> u64 {
    let key = derive_key(seed, index, purpose);
    // The last word has absorbed every key component.
    u64::from_le_bytes(key[24..].try_into().expect("8 bytes"))
}
