//! Seeded random streams. Every consumer of randomness draws from its own
//! stream of a ChaCha generator keyed by the run seed, so adding draws in one
//! place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    CpInit = 2,
    HeadInit = 3,
    Shuffle = 4,
    SynthCp = 5,
    SynthHead = 6,
    SynthMask = 7,
    SynthNoise = 8,
}

pub fn derive_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
