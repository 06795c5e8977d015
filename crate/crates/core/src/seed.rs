//! Expansion of one run seed into independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Noise = 4,
    Sampling = 5,
    Graph = 6,
}

/// Same `(seed, stream)` always yields the same sequence; different streams
/// of one seed do not overlap.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
