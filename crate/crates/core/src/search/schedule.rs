//! Decode-time block schedules.

use crate::model::blocks::{tile, Block};
use crate::types::BlockScheduleSpec;

/// Blocks tiling the label slots `[1, l_max]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSchedule {
    blocks: Vec<Block>,
}

impl BlockSchedule {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.size).collect()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.start).collect()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// `Fixed(B)`: size-`B` blocks; `Mixed(N, B)`: `N` size-1 blocks, then
/// size-`B` blocks. The last block is truncated at `l_max`.
pub fn make_schedule(spec: BlockScheduleSpec, l_max: usize) -> BlockSchedule {
    let blocks = match spec {
        BlockScheduleSpec::Fixed(b) => tile(l_max, b.max(1)),
        BlockScheduleSpec::Mixed { n, b } => {
            let head = n.min(l_max);
            let mut blocks = tile(head, 1);
            blocks.extend(tile(l_max - head, b.max(1)).into_iter().map(|blk| Block {
                start: blk.start + head,
                size: blk.size,
            }));
            blocks
        }
    };
    BlockSchedule { blocks }
}
