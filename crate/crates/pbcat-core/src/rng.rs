//! Seeded random streams.
//!
//! Independent concerns draw from separate ChaCha streams of the same seed
//! so that, for example, sampling patch placements never shifts the data
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATA_ORDER: u64 = 0;
pub const STREAM_PLACEMENT: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_ATTACK: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
