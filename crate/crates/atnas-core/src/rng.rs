//! Seed derivation for reproducible runs.
//!
//! Every stochastic site in the engine draws from a `ChaCha8Rng` seeded
//! through [`derive_seed`]. Per-task seeds are derived from the global seed
//! and a stable stream/index pair, never from worker identity, so results
//! are independent of how work is sharded across workers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed stream labels, one per stochastic subsystem.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    SupernetInit,
    Warmup,
    TrainTask,
    EvalTask,
    Evolution,
    CodeSample,
    Predictor,
    DataGen,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::SupernetInit => 0x01,
            Stream::Warmup => 0x02,
            Stream::TrainTask => 0x03,
            Stream::EvalTask => 0x04,
            Stream::Evolution => 0x05,
            Stream::CodeSample => 0x06,
            Stream::Predictor => 0x07,
            Stream::DataGen => 0x08,
        }
    }
}

/// splitmix64 finalizer; a cheap, well-mixed u64 -> u64 hash.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from the run seed, a stream label and an index.
pub fn derive_seed(global: u64, stream: Stream, index: u64) -> u64 {
    mix64(mix64(global ^ stream.tag().wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}

/// RNG for a derived stream position.
pub fn stream_rng(global: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stream, index))
}
