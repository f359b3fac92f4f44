//! Named random streams derived from one master seed.
//!
//! Every consumer of randomness in a game draws from its own stream, so two
//! harness levels playing the same (board, seed) see the same noise flips,
//! the same MH proposals and the same question draws even when they take
//! different actions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Placement = 1,
    Noise = 2,
    Mh = 3,
    Questions = 4,
    Revision = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Streams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream as u64);
        rng
    }

    /// Seed for a sub-stream keyed by two counters (e.g. update index and
    /// particle index), independent of thread scheduling.
    pub fn derive_seed(&self, stream: Stream, a: u64, b: u64) -> u64 {
        splitmix(splitmix(splitmix(self.master ^ (stream as u64) << 56) ^ a) ^ b)
    }
}

/// Stable 64-bit FNV-1a hash, used to turn board ids into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Master seed of one game; depends only on the board and seed index so
/// every harness level replays the same streams.
pub fn game_seed(board_id: &str, seed: u64) -> u64 {
    splitmix(fnv1a(board_id.as_bytes()) ^ splitmix(seed))
}
