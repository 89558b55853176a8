//! Seeded generator streams.
//!
//! A run is driven by one root seed. Each agent and the environment draw from
//! their own ChaCha8 stream (same key, distinct stream id), so the draws made
//! by one consumer never depend on how many draws another consumer made.
//! Stream 0 belongs to the environment, stream `1 + i` to agent `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const ENV_STREAM: u64 = 0;

pub fn agent_stream(agent: usize) -> u64 {
    1 + agent as u64
}

pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent seed for Monte Carlo sample `index` from a root seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-run generator set: one stream for the environment, one per agent.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub env: StreamRng,
    pub agents: Vec<StreamRng>,
}

impl RngStreams {
    pub fn new(seed: u64, num_agents: usize) -> Self {
        RngStreams {
            env: substream(seed, ENV_STREAM),
            agents: (0..num_agents)
                .map(|i| substream(seed, agent_stream(i)))
                .collect(),
        }
    }
}

/// Inverse-CDF draw from a discrete distribution with one uniform.
///
/// Never returns an index with zero probability; round-off at the top end falls
/// back to the last index with positive mass.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = k;
        cum += p;
        if u < cum {
            return k;
        }
    }
    last_positive
}

pub fn draw<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    sample_index(probs, u)
}
