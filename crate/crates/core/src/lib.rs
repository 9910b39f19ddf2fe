//! Block attention-mask decoding (AMD) for hybrid CTC/attention recognizers
//! at toy scale: a CTC head, a decoder whose shared backbone carries an
//! autoregressive and a block-masked low-rank delta, the baseline CTC + AR
//! beam search, the tripartite CTC + AMD + AR block search, a synthetic
//! task generator, file formats and evaluation.

pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod par;
pub mod search;
pub mod types;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use par::Exec;
pub use types::{
    BlockScheduleSpec, EncoderOutput, FusionWeights, Hypothesis, NBestList, SearchConfig, TokenId,
    TrainWeights, Vocab,
};
