//! Training objectives with analytic gradients: CTC head, teacher-forced AR
//! cross-entropy, their weighted sum, and the four-pass block-masked AMD
//! loss.

use crate::ctc::{ctc_loss, CtcLoss};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::blocks::Block;
use crate::model::decoder::{check_tokens, AttentionMaskPlan, Ctx};
use crate::model::params::{Mode, ToyDecoderParams};
use crate::model::tape::Var;
use crate::types::{EncoderOutput, TokenId, TrainWeights, Vocab};

/// Loss value with sparse per-slot gradients.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<(usize, Mat)>,
}

impl LossGrad {
    /// Dense gradient for `slot`, zeros if the slot got none.
    pub fn grad(&self, params: &ToyDecoderParams, slot: usize) -> Mat {
        self.grads
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| {
                let (r, c) = params.layout().shape(slot);
                Mat::zeros(r, c)
            })
    }
}

/// Decoder input `[sos, y1..yL]` and targets `[y1..yL, eos]`.
pub fn teacher_forcing(reference: &[TokenId], vocab: &Vocab) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut input = Vec::with_capacity(reference.len() + 1);
    input.push(vocab.sos_id());
    input.extend_from_slice(reference);
    let mut target = reference.to_vec();
    target.push(vocab.eos_id());
    (input, target)
}

/// `-Σ_j log_probs[j, targets[j]]`.
pub fn nll(log_probs: &Mat, targets: &[TokenId]) -> f64 {
    assert_eq!(log_probs.rows(), targets.len());
    -targets
        .iter()
        .enumerate()
        .map(|(j, &t)| log_probs.get(j, t))
        .sum::<f64>()
}

fn check(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    reference: &[TokenId],
    vocab: &Vocab,
) -> Result<()> {
    if params.hyper().vocab != vocab.size() {
        return Err(Error::invalid("model and vocabulary sizes differ"));
    }
    if enc.dim() != params.hyper().feat_dim {
        return Err(Error::invalid("encoder dim does not match model"));
    }
    if reference
        .iter()
        .any(|&t| vocab.is_special(t) || t >= vocab.size())
    {
        return Err(Error::invalid("reference must hold ordinary labels only"));
    }
    // sos + reference + eos must fit the position table
    check_tokens(params, &vec![vocab.sos_id(); reference.len() + 2])
}

fn ar_term(ctx: &mut Ctx<'_>, enc: &EncoderOutput, reference: &[TokenId], vocab: &Vocab) -> Var {
    let (input, target) = teacher_forcing(reference, vocab);
    let mem = ctx.memory(enc.frames());
    let kv = ctx.cross_kv(mem, Mode::Ar);
    let h = ctx.hidden(
        Mode::Ar,
        &kv,
        &input,
        &AttentionMaskPlan::causal(input.len()),
    );
    let lp = ctx.output(h);
    let picks = target.iter().enumerate().map(|(j, &t)| (j, t)).collect();
    ctx.g.pick_sum(lp, picks, -1.0)
}

/// Returns `None` when the reference cannot be aligned to the frames.
fn ctc_term(
    ctx: &mut Ctx<'_>,
    enc: &EncoderOutput,
    reference: &[TokenId],
    vocab: &Vocab,
) -> Result<Option<Var>> {
    let lp = ctx.ctc_head(enc.frames());
    match ctc_loss(ctx.g.value(lp), reference, vocab.blank_id())? {
        CtcLoss::Finite { loss, grad } => Ok(Some(ctx.g.external(lp, loss, grad))),
        CtcLoss::Infeasible => Ok(None),
    }
}

/// Teacher-forced AR cross-entropy over `|ref| + 1` targets (eos included).
pub fn ar_loss(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    reference: &[TokenId],
    vocab: &Vocab,
) -> Result<LossGrad> {
    check(params, enc, reference, vocab)?;
    let mut ctx = Ctx::new(params);
    let root = ar_term(&mut ctx, enc, reference, vocab);
    Ok(LossGrad {
        loss: ctx.g.scalar(root),
        grads: ctx.g.backward(root),
    })
}

/// CTC loss of the emission head; `None` for an infeasible alignment.
pub fn ctc_head_loss(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    reference: &[TokenId],
    vocab: &Vocab,
) -> Result<Option<LossGrad>> {
    check(params, enc, reference, vocab)?;
    let mut ctx = Ctx::new(params);
    let Some(root) = ctc_term(&mut ctx, enc, reference, vocab)? else {
        return Ok(None);
    };
    Ok(Some(LossGrad {
        loss: ctx.g.scalar(root),
        grads: ctx.g.backward(root),
    }))
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    /// `γ1·ctc + γ2·ar`, CTC dropped when infeasible
    pub total: f64,
    pub ctc: Option<f64>,
    pub ar: f64,
    pub grads: Vec<(usize, Mat)>,
}

/// Weighted CTC + AR objective for one utterance.
pub fn joint_loss(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    reference: &[TokenId],
    weights: &TrainWeights,
    vocab: &Vocab,
) -> Result<JointLoss> {
    check(params, enc, reference, vocab)?;
    let mut ctx = Ctx::new(params);
    let mut terms = Vec::with_capacity(2);
    let ctc = if weights.gamma1 > 0.0 {
        ctc_term(&mut ctx, enc, reference, vocab)?
    } else {
        None
    };
    let ctc_value = ctc.map(|v| ctx.g.scalar(v));
    if let Some(c) = ctc {
        terms.push(ctx.g.scale(c, weights.gamma1));
    }
    let ar = ar_term(&mut ctx, enc, reference, vocab);
    let ar_value = ctx.g.scalar(ar);
    terms.push(ctx.g.scale(ar, weights.gamma2));
    let root = ctx.g.sum_scalars(terms);
    Ok(JointLoss {
        total: ctx.g.scalar(root),
        ctc: ctc_value,
        ar: ar_value,
        grads: ctx.g.backward(root),
    })
}

/// Block-masked AMD loss: for every pass and every block of that pass the
/// block is hidden and all of its slots are scored against the ground
/// truth. Inputs are `[sos, y1..yL, eos]` and slots cover `[1, L + 1]`.
pub fn amd_loss(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    reference: &[TokenId],
    passes: &[Vec<Block>],
    vocab: &Vocab,
) -> Result<LossGrad> {
    check(params, enc, reference, vocab)?;
    let mut seq = Vec::with_capacity(reference.len() + 2);
    seq.push(vocab.sos_id());
    seq.extend_from_slice(reference);
    seq.push(vocab.eos_id());
    let slots = seq.len() - 1;
    for p in passes {
        let mut next = 1;
        for b in p {
            if b.start != next || b.size == 0 {
                return Err(Error::invalid("AMD pass blocks must tile the sequence"));
            }
            next = b.end();
        }
        if next != slots + 1 {
            return Err(Error::invalid("AMD pass blocks must cover every slot"));
        }
    }

    let mut ctx = Ctx::new(params);
    let mem = ctx.memory(enc.frames());
    let kv = ctx.cross_kv(mem, Mode::Amd);
    let mut terms = Vec::new();
    for pass in passes {
        for b in pass {
            let plan = AttentionMaskPlan::block(seq.len(), b.start, b.size)?;
            let h = ctx.hidden(Mode::Amd, &kv, &seq, &plan);
            let h = ctx.g.select_rows(h, (b.start..b.end()).collect());
            let lp = ctx.output(h);
            let picks = (0..b.size).map(|k| (k, seq[b.start + k])).collect();
            terms.push(ctx.g.pick_sum(lp, picks, -1.0));
        }
    }
    let root = ctx.g.sum_scalars(terms);
    Ok(LossGrad {
        loss: ctx.g.scalar(root),
        grads: ctx.g.backward(root),
    })
}
