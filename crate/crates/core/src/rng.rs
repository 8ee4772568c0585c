//! Named random streams derived from a single seed.
//!
//! Each consumer of randomness draws from its own ChaCha stream, so adding
//! draws in one place never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Dropout,
    Batch,
    Sampling,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Dropout => 2,
            Stream::Batch => 3,
            Stream::Sampling => 4,
        }
    }
}

/// Generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the dropout mask at `site` of `layer` on training `step`.
pub fn dropout_seed(seed: u64, step: u64, layer: usize, site: usize) -> u64 {
    let mut h = mix(seed ^ Stream::Dropout.id());
    for x in [step, layer as u64, site as u64] {
        h = mix(h ^ x);
    }
    h
}
