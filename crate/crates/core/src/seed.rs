//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed, a stream
//! tag and an index (teacher number, query counter, ...). The derived value
//! is `mix(mix(master ^ mix(tag)) ^ mix(index + 1))` where `mix` is the
//! SplitMix64 finalizer. Each derived seed initializes a `ChaCha8Rng`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used during training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Partition = 1,
    GeneratorInit = 2,
    TeacherInit = 3,
    TeacherBatch = 4,
    Latent = 5,
    Projection = 6,
    AggregationNoise = 7,
    ClassRatio = 8,
    Generate = 9,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(master ^ mix(stream as u64)) ^ mix(index.wrapping_add(1)))
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
