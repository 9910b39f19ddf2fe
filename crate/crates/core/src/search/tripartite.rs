//! Block-wise search fusing CTC, AMD and AR scores.
//!
//! For every block `[i, i+B−1]` each live hypothesis gets one AMD pass whose
//! input is `[sos] ++ prefix ++ B masked slots ++ future`, where the future
//! context is the CTC greedy hypothesis followed by eos. Per slot the top
//! `k1` AMD tokens, plus the greedy CTC token at that slot, are candidates;
//! a `k2` beam over `λ1·α_CTC + λ3·α_AMD` walks the block left to right.
//! Block-final hypotheses are then re-ranked with `λ2·α_AR` from one causal
//! pass each and pruned to `k_main`.

use std::time::Instant;

use crate::ctc::{ctc_greedy, ctc_prefix_init, CtcPosteriors};
use crate::error::Result;
use crate::linalg::Mat;
use crate::model::blocks::Block;
use crate::model::decoder::{AttentionMaskPlan, DecoderSession};
use crate::model::params::{Mode, ToyDecoderParams};
use crate::search::{check_config, extend, make_schedule, prune, with_sos, DecodeStats, Decoded};
use crate::types::{
    fuse, fused_score, EncoderOutput, Hypothesis, NBestList, SearchConfig, TokenId, Vocab,
};

/// CTC greedy labels followed by eos, cut so every position fits `max_len`.
pub fn future_context(post: &CtcPosteriors, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    let mut ext = ctc_greedy(post, vocab);
    ext.push(vocab.eos_id());
    ext.truncate(max_len.saturating_sub(1));
    ext
}

/// AMD input and mask for `prefix` (the `i − 1` ids before the block).
/// Position `p > i+B−1` carries `ext[p − 1]` when it exists.
pub fn amd_input(
    prefix: &[TokenId],
    block: Block,
    ext: &[TokenId],
    vocab: &Vocab,
) -> Result<(Vec<TokenId>, AttentionMaskPlan)> {
    debug_assert_eq!(prefix.len() + 1, block.start);
    let mut seq = with_sos(prefix, vocab);
    // placeholder ids; masked slots never see their content
    seq.resize(block.end(), vocab.blank_id());
    if ext.len() >= block.end() {
        seq.extend_from_slice(&ext[block.end() - 1..]);
    }
    let plan = AttentionMaskPlan::block(seq.len(), block.start, block.size)?;
    Ok((seq, plan))
}

/// Top `k1` emittable ids of `row` (ties to the lower id), then `extra` if
/// it is emittable and not already present.
fn candidates(
    row: &[f64],
    vocab: &Vocab,
    k1: usize,
    extra: Option<TokenId>,
) -> Vec<(TokenId, f64)> {
    let emittable: Vec<TokenId> = vocab.emittable().collect();
    let mut ids = emittable.clone();
    ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    ids.truncate(k1);
    if let Some(t) = extra {
        if emittable.contains(&t) && !ids.contains(&t) {
            ids.push(t);
        }
    }
    ids.into_iter().map(|t| (t, row[t])).collect()
}

pub fn decode_tripartite(
    enc: &EncoderOutput,
    post: &CtcPosteriors,
    params: &ToyDecoderParams,
    vocab: &Vocab,
    cfg: &SearchConfig,
) -> Result<Decoded> {
    let t0 = Instant::now();
    check_config(params, post, vocab, cfg)?;
    let w = cfg.weights;
    let amd = DecoderSession::new(params, enc, Mode::Amd)?;
    let ar = DecoderSession::new(params, enc, Mode::Ar)?;
    let ext = future_context(post, vocab, params.hyper().max_len);
    let schedule = make_schedule(cfg.schedule, cfg.l_max);
    let mut stats = DecodeStats::default();
    let mut main = vec![Hypothesis::empty(ctc_prefix_init(post, vocab))];
    let cm_score = |h: &Hypothesis| fuse(h.alpha_ctc, 0.0, h.alpha_amd, &w);

    for &block in schedule.blocks() {
        let (live, done): (Vec<_>, Vec<_>) = main.into_iter().partition(|h| !h.finished);
        if live.is_empty() {
            main = done;
            break;
        }
        stats.block_steps += 1;

        // one AMD pass per live hypothesis: per-slot candidate sets
        let mut slot_sets: Vec<Vec<Vec<(TokenId, f64)>>> = Vec::with_capacity(live.len());
        for h in &live {
            let (seq, plan) = amd_input(&h.tokens, block, &ext, vocab)?;
            let lp: Mat = amd.forward_masked(&seq, &plan)?;
            stats.amd_calls += 1;
            slot_sets.push(
                (0..block.size)
                    .map(|k| {
                        candidates(
                            lp.row(k),
                            vocab,
                            cfg.k1,
                            ext.get(block.start + k - 1).copied(),
                        )
                    })
                    .collect(),
            );
        }

        // k2 beam across the block's slots
        let mut cm: Vec<(Hypothesis, usize)> =
            live.into_iter().enumerate().map(|(i, h)| (h, i)).collect();
        let mut finished_here = Vec::new();
        for k in 0..block.size {
            let mut next = Vec::new();
            for (h, src) in &cm {
                for &(tok, lp) in &slot_sets[*src][k] {
                    let mut nh = extend(h, tok, post, vocab, &mut stats)?;
                    nh.alpha_amd += lp;
                    if nh.finished {
                        finished_here.push(nh);
                    } else {
                        next.push((nh, *src));
                    }
                }
            }
            let mut keyed: Vec<(f64, Hypothesis, usize)> = next
                .into_iter()
                .map(|(h, s)| (cm_score(&h), h, s))
                .collect();
            keyed.sort_by(|a, b| crate::types::rank_cmp(a.0, &a.1.tokens, b.0, &b.1.tokens));
            keyed.truncate(cfg.k2);
            cm = keyed.into_iter().map(|(_, h, s)| (h, s)).collect();
        }

        // AR re-ranking: one causal pass per block-final hypothesis
        let mut pool = done;
        for mut h in cm.into_iter().map(|(h, _)| h).chain(finished_here) {
            let input = with_sos(&h.tokens, vocab);
            let rows: Vec<usize> = (block.start - 1..h.tokens.len()).collect();
            let lp = ar.forward_causal_rows(&input, rows.clone())?;
            stats.ar_calls += 1;
            for (r, &row) in rows.iter().enumerate() {
                h.alpha_ar += lp.get(r, h.tokens[row]);
            }
            pool.push(h);
        }
        main = prune(pool, cfg.k_main, |h| fused_score(h, &w));
    }

    stats.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(Decoded {
        nbest: NBestList::rank(main, &w, cfg.k_main, cfg.length_norm),
        stats,
    })
}
