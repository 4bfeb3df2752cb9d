//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    LayerSelection = 1,
    BatchShuffle = 2,
    ClientSampling = 3,
    ModelInit = 4,
    Partition = 5,
    Dataset = 6,
    Traffic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(seed);
    for word in [stream as u64, client, round] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, client: u64, round: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, client, round))
}
