//! Seed splitting. One master seed feeds independent ChaCha8 streams, one
//! per component: the generator is seeded with the master seed and the
//! stream number selects a disjoint keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Components that draw randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Data = 4,
    Probe = 5,
    Gradcheck = 6,
}

pub fn stream(master: u64, which: Stream) -> ChaCha8Rng {
    indexed(master, which as u64)
}

/// Stream selected by an arbitrary index, e.g. the epoch of a shuffle.
pub fn indexed(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Per-epoch shuffle stream: the shuffle component's number in the high
/// half, the epoch in the low half.
pub fn shuffle_stream(master: u64, epoch: u64) -> ChaCha8Rng {
    indexed(master, ((Stream::Shuffle as u64) << 32) | (epoch & 0xffff_ffff))
}

/// Per-epoch dropout stream, split the same way as the shuffle stream.
pub fn dropout_stream(master: u64, epoch: u64) -> ChaCha8Rng {
    indexed(master, ((Stream::Dropout as u64) << 32) | (epoch & 0xffff_ffff))
}
