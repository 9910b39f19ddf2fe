//! Training-time block-size sampling for the AMD loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Forward passes per utterance in the AMD objective.
pub const AMD_PASSES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// one block size per pass
    #[default]
    Uni,
    /// a fresh size for every block of a pass
    Var,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uni" => Ok(Self::Uni),
            "var" => Ok(Self::Var),
            _ => Err(crate::error::Error::config(format!(
                "unknown sampling strategy {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSampling {
    pub strategy: SamplingStrategy,
    pub seed: u64,
}

/// Contiguous masked block, 1-based start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub size: usize,
}

impl Block {
    pub fn end(&self) -> usize {
        self.start + self.size
    }
}

/// RNG stream keyed by `(seed, utterance, epoch)`.
pub fn stream_rng(seed: u64, utt: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&utt.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..].copy_from_slice(b"amd-mask");
    ChaCha8Rng::from_seed(key)
}

/// Tiles `[1, len]` with blocks of `size`, the last one truncated.
pub fn tile(len: usize, size: usize) -> Vec<Block> {
    assert!(size >= 1);
    let mut out = Vec::with_capacity(len.div_ceil(size));
    let mut start = 1;
    while start <= len {
        let s = size.min(len + 1 - start);
        out.push(Block { start, size: s });
        start += s;
    }
    out
}

/// Block plans for the [`AMD_PASSES`] passes over an utterance of `len`
/// target positions.
pub fn sample_blocks(len: usize, s: &BlockSampling, utt: u64, epoch: u64) -> Vec<Vec<Block>> {
    let mut rng = stream_rng(s.seed, utt, epoch);
    (0..AMD_PASSES)
        .map(|_| {
            if len == 0 {
                return Vec::new();
            }
            match s.strategy {
                SamplingStrategy::Uni => tile(len, rng.random_range(1..=len)),
                SamplingStrategy::Var => {
                    let mut blocks = Vec::new();
                    let mut start = 1;
                    while start <= len {
                        let size = rng.random_range(1..=len).min(len + 1 - start);
                        blocks.push(Block { start, size });
                        start += size;
                    }
                    blocks
                }
            }
        })
        .collect()
}
