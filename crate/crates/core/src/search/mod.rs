//! One-pass decoders: the CTC + AR label-synchronous baseline and the
//! block-wise tripartite CTC + AMD + AR search.

pub mod baseline;
pub mod schedule;
pub mod tripartite;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use baseline::decode_baseline;
pub use schedule::{make_schedule, BlockSchedule};
pub use tripartite::decode_tripartite;

use crate::ctc::ctc_prefix_extend;
use crate::ctc::CtcPosteriors;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::decoder::ctc_posteriors;
use crate::model::params::ToyDecoderParams;
use crate::par::Exec;
use crate::types::{rank_cmp, EncoderOutput, Hypothesis, NBestList, SearchConfig, TokenId, Vocab};

/// Model invocation counts and wall time of one decode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub amd_calls: u64,
    pub ar_calls: u64,
    pub ctc_extensions: u64,
    pub block_steps: u64,
    pub wall_time_s: f64,
}

impl DecodeStats {
    pub fn add(&mut self, o: &DecodeStats) {
        self.amd_calls += o.amd_calls;
        self.ar_calls += o.ar_calls;
        self.ctc_extensions += o.ctc_extensions;
        self.block_steps += o.block_steps;
        self.wall_time_s += o.wall_time_s;
    }
}

/// `(amd_calls, ar_calls, ctc_extensions)`.
pub fn count_decoder_calls(stats: &DecodeStats) -> (u64, u64, u64) {
    (stats.amd_calls, stats.ar_calls, stats.ctc_extensions)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub nbest: NBestList,
    pub stats: DecodeStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Baseline,
    Tripartite,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "tripartite" => Ok(Self::Tripartite),
            _ => Err(Error::config(format!("unknown decoder {s:?}"))),
        }
    }
}

pub(crate) fn check_config(
    params: &ToyDecoderParams,
    post: &CtcPosteriors,
    vocab: &Vocab,
    cfg: &SearchConfig,
) -> Result<()> {
    cfg.validate()?;
    if post.vocab_size() != vocab.size() || params.hyper().vocab != vocab.size() {
        return Err(Error::invalid(
            "posteriors, model and vocabulary sizes differ",
        ));
    }
    // sos plus l_max emitted ids must fit the position table
    if cfg.l_max + 1 > params.hyper().max_len {
        return Err(Error::config(format!(
            "l_max {} needs max_len of at least {}",
            cfg.l_max,
            cfg.l_max + 1
        )));
    }
    Ok(())
}

/// Sorts by `score` under the shared tie-break and keeps the first `k`.
pub(crate) fn prune(
    mut hyps: Vec<Hypothesis>,
    k: usize,
    score: impl Fn(&Hypothesis) -> f64,
) -> Vec<Hypothesis> {
    let mut keyed: Vec<(f64, Hypothesis)> = hyps.drain(..).map(|h| (score(&h), h)).collect();
    keyed.sort_by(|a, b| rank_cmp(a.0, &a.1.tokens, b.0, &b.1.tokens));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, h)| h).collect()
}

/// Extends `h` by `tok`, updating the CTC prefix score.
pub(crate) fn extend(
    h: &Hypothesis,
    tok: TokenId,
    post: &CtcPosteriors,
    vocab: &Vocab,
    stats: &mut DecodeStats,
) -> Result<Hypothesis> {
    let (state, psi) = ctc_prefix_extend(&h.ctc_state, tok, post, vocab)?;
    stats.ctc_extensions += 1;
    let mut tokens = Vec::with_capacity(h.tokens.len() + 1);
    tokens.extend_from_slice(&h.tokens);
    tokens.push(tok);
    Ok(Hypothesis {
        tokens,
        alpha_ctc: psi,
        alpha_ar: h.alpha_ar,
        alpha_amd: h.alpha_amd,
        ctc_state: state,
        finished: tok == vocab.eos_id(),
    })
}

/// `[sos] ++ tokens`.
pub(crate) fn with_sos(tokens: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(vocab.sos_id());
    v.extend_from_slice(tokens);
    v
}

/// Runs the CTC head and the chosen decoder; wall time covers both.
pub fn decode_utterance(
    kind: DecoderKind,
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    vocab: &Vocab,
    cfg: &SearchConfig,
) -> Result<Decoded> {
    let t0 = Instant::now();
    let post = ctc_posteriors(params, enc)?;
    let mut out = match kind {
        DecoderKind::Baseline => decode_baseline(enc, &post, params, vocab, cfg)?,
        DecoderKind::Tripartite => decode_tripartite(enc, &post, params, vocab, cfg)?,
    };
    out.stats.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(out)
}

/// Decodes every utterance; output order follows `utts`.
pub fn decode_corpus(
    kind: DecoderKind,
    params: &ToyDecoderParams,
    utts: &[Utterance],
    vocab: &Vocab,
    cfg: &SearchConfig,
    exec: Exec,
) -> Result<Vec<Decoded>> {
    exec.map(utts, |u| decode_utterance(kind, params, &u.enc, vocab, cfg))
        .into_iter()
        .collect()
}
