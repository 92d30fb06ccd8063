//! Named random streams derived from one root seed.
//!
//! Each consumer draws from its own ChaCha stream so that, for example,
//! turning dropout on does not shift the data sampling sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Dropout,
    Data,
    Smote,
    Split,
    Generator,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Dropout => 2,
            Stream::Data => 3,
            Stream::Smote => 4,
            Stream::Split => 5,
            Stream::Generator => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Stream for item `index` of a consumer, e.g. one synthetic patient.
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which.id() << 32 | (index & 0xFFFF_FFFF));
    rng
}
