//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded
//! from the run seed with a distinct stream id per purpose so that, for example, weight
//! initialization and stream ordering never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Changing any value changes every derived draw.
pub mod purpose {
    pub const WEIGHT_INIT: u64 = 1;
    pub const TRAIN_SHUFFLE: u64 = 2;
    pub const TASK_MEANS: u64 = 3;
    pub const TASK_TRAIN: u64 = 4;
    pub const TASK_TEST: u64 = 5;
    pub const TASK_SHIFT: u64 = 6;
    pub const ORDER_IS: u64 = 7;
    pub const ORDER_DS: u64 = 8;
    pub const RESAMPLE_CI: u64 = 9;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
