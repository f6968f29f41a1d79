//! Counter-keyed random streams.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha8 stream whose
//! key is `(master seed, stream kind, replicate)` and whose stream id is the
//! per-path index. A path consumes its stream strictly in time order and the
//! number of draws per step never depends on the inputs, so the noise seen by
//! path `j` at time `t` is a function of `(seed, replicate, j, t)` only. This is
//! what makes objective evaluations at different policies share their noise
//! (common random numbers) and makes results independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct kinds never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamKind {
    Prior = 1,
    Process = 2,
    Measurement = 3,
    InputPath = 4,
    TruthPrior = 5,
    TruthProcess = 6,
    TruthMeasurement = 7,
    Filter = 8,
}

/// Identifies one frozen noise table: the master seed plus a replicate index
/// (input path, validation run, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub replicate: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, replicate: u64) -> Self {
        Self { seed, replicate }
    }

    /// Independent generator for path `index` of this table.
    pub fn stream(&self, kind: StreamKind, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(kind as u64).to_le_bytes());
        key[16..24].copy_from_slice(&self.replicate.to_le_bytes());
        key[24..].copy_from_slice(b"pcrlbdsg");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}
