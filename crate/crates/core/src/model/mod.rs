//! Toy attention decoder with a shared backbone and two low-rank delta
//! sets (AR and AMD), its losses, block sampling and training.

pub mod blocks;
pub mod decoder;
pub mod loss;
pub mod params;
pub mod tape;
pub mod train;

pub use blocks::{sample_blocks, Block, BlockSampling, SamplingStrategy, AMD_PASSES};
pub use decoder::{
    ctc_posteriors, forward_amd, forward_ar, forward_backbone, AttentionMaskPlan, DecoderSession,
};
pub use loss::{amd_loss, ar_loss, ctc_head_loss, joint_loss, JointLoss, LossGrad};
pub use params::{Hyper, Mode, ParamGroup, ToyDecoderParams};
pub use train::{train, train_with_progress, LossTrace, Stage, TracePoint, TrainConfig};
