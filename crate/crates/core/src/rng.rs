//! Seed policy: one master seed fans out to stage seeds by a counter-based split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed number `counter` of the stream rooted at `seed`.
pub fn split(seed: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minibatch indices drawn without replacement, reshuffled each epoch.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    /// Next `batch` indices and whether an epoch boundary was crossed before drawing them.
    pub fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let mut idx = Vec::with_capacity(batch);
        let mut wrapped = false;
        while idx.len() < batch {
            if self.cursor == self.order.len() {
                wrapped = true;
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        (idx, wrapped)
    }
}

/// Pipeline stages, each with a fixed counter in the master stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base = 0,
    Harvest = 1,
    Autoencoder = 2,
    Diffusion = 3,
    Generate = 4,
    Analyze = 5,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Base,
        Stage::Harvest,
        Stage::Autoencoder,
        Stage::Diffusion,
        Stage::Generate,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Harvest => "harvest",
            Stage::Autoencoder => "autoencoder",
            Stage::Diffusion => "diffusion",
            Stage::Generate => "generate",
            Stage::Analyze => "analyze",
        }
    }

    pub fn seed(self, master: u64) -> u64 {
        split(master, self as u64)
    }
}
