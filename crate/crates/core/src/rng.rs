use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one reproducible random stream.
///
/// Two handles with the same `(seed, stream_id)` always yield the same draw
/// sequence. Different `stream_id`s select disjoint ChaCha streams under the
/// same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Sampler blocks that own their own family of streams within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Block {
    Eta = 0,
    Omega = 1,
    BigOmega = 2,
    AlphaDelta = 3,
    Sigma2 = 4,
    Lambda = 5,
    DlPhi = 6,
    DlTau = 7,
    DlPsi = 8,
    Psi = 9,
    Impute = 10,
    Predict = 11,
    FactorScale = 12,
    Init = 13,
}

/// Stream factory for one sweep of a chain.
///
/// The stream id packs `(iteration, block, unit)` as
/// `iteration << 28 | block << 24 | unit`, so every unit of every block of
/// every iteration draws from its own stream and parallel execution is
/// bitwise reproducible.
#[derive(Debug, Clone, Copy)]
pub struct SweepStreams {
    pub seed: u64,
    pub iteration: u64,
}

impl SweepStreams {
    const UNIT_BITS: u32 = 24;
    const BLOCK_BITS: u32 = 4;

    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration }
    }

    pub fn stream(&self, block: Block, unit: usize) -> RngStream {
        debug_assert!((unit as u64) < (1 << Self::UNIT_BITS));
        let id = (self.iteration << (Self::UNIT_BITS + Self::BLOCK_BITS))
            | ((block as u64) << Self::UNIT_BITS)
            | (unit as u64 & ((1 << Self::UNIT_BITS) - 1));
        RngStream::new(self.seed, id)
    }

    pub fn rng(&self, block: Block, unit: usize) -> ChaCha8Rng {
        self.stream(block, unit).rng()
    }
}
