//! Label-synchronous CTC + AR beam search.

use std::time::Instant;

use crate::ctc::{ctc_prefix_init, CtcPosteriors};
use crate::error::{Error, Result};
use crate::model::decoder::DecoderSession;
use crate::model::params::{Mode, ToyDecoderParams};
use crate::search::{check_config, extend, prune, with_sos, DecodeStats, Decoded};
use crate::types::{fused_score, EncoderOutput, Hypothesis, NBestList, SearchConfig, Vocab};

/// Expands every live hypothesis with every emittable token, scores
/// `λ1·α_CTC + λ2·α_AR` and keeps `k_main`; finished hypotheses stay in the
/// pool. Stops after `l_max` steps or once every survivor is finished.
pub fn decode_baseline(
    enc: &EncoderOutput,
    post: &CtcPosteriors,
    params: &ToyDecoderParams,
    vocab: &Vocab,
    cfg: &SearchConfig,
) -> Result<Decoded> {
    let t0 = Instant::now();
    check_config(params, post, vocab, cfg)?;
    if cfg.weights.lambda3 != 0.0 {
        return Err(Error::config("the baseline decoder needs lambda3 = 0"));
    }
    let w = cfg.weights;
    let ar = DecoderSession::new(params, enc, Mode::Ar)?;
    let mut stats = DecodeStats::default();
    let mut beam = vec![Hypothesis::empty(ctc_prefix_init(post, vocab))];

    for _ in 0..cfg.l_max {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        stats.block_steps += 1;
        let mut pool = Vec::new();
        for h in beam {
            if h.finished {
                pool.push(h);
                continue;
            }
            let input = with_sos(&h.tokens, vocab);
            let last = input.len() - 1;
            let lp = ar.forward_causal_rows(&input, vec![last])?;
            stats.ar_calls += 1;
            for tok in vocab.emittable() {
                let mut nh = extend(&h, tok, post, vocab, &mut stats)?;
                nh.alpha_ar += lp.get(0, tok);
                pool.push(nh);
            }
        }
        beam = prune(pool, cfg.k_main, |h| fused_score(h, &w));
    }
    stats.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(Decoded {
        nbest: NBestList::rank(beam, &w, cfg.k_main, cfg.length_norm),
        stats,
    })
}
