//! Pre-norm transformer decoder shared by the AR and AMD modes.
//!
//! AR mode uses a causal self-attention mask. AMD mode hides one contiguous
//! block of input positions: their token embeddings are replaced by zero
//! (the positional encoding stays) and they are removed from the key set of
//! every query, themselves included. Position 0 always holds sos.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::params::{Mode, Norm, Proj, ToyDecoderParams};
use crate::model::tape::{Graph, KeyMask, Var};
use crate::types::{EncoderOutput, TokenId};

/// Self-attention structure for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskPlan {
    len: usize,
    masked: Option<Range<usize>>,
}

impl AttentionMaskPlan {
    pub fn causal(len: usize) -> Self {
        Self { len, masked: None }
    }

    /// Block `[start, start + size)` hidden from every query.
    pub fn block(len: usize, start: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("masked block must not be empty"));
        }
        if start == 0 {
            return Err(Error::invalid(
                "masked block must not cover the sos position",
            ));
        }
        if start + size > len {
            return Err(Error::invalid(format!(
                "masked block [{start}, {}) exceeds input length {len}",
                start + size
            )));
        }
        Ok(Self {
            len,
            masked: Some(start..start + size),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn masked(&self) -> Option<Range<usize>> {
        self.masked.clone()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked.as_ref().is_some_and(|m| m.contains(&pos))
    }

    /// Whether query `q` may read key `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.key_mask().allows(q, k)
    }

    pub(crate) fn key_mask(&self) -> KeyMask {
        match &self.masked {
            None => KeyMask::Causal,
            Some(r) => KeyMask::ExcludeRange {
                start: r.start,
                end: r.end,
            },
        }
    }
}

/// A graph plus lazily created parameter leaves.
pub(crate) struct Ctx<'a> {
    pub g: Graph,
    pub p: &'a ToyDecoderParams,
    vars: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(p: &'a ToyDecoderParams) -> Self {
        Self {
            g: Graph::new(),
            p,
            vars: vec![None; p.layout().len()],
        }
    }

    pub fn w(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = self.g.param(slot, self.p.tensor(slot));
        self.vars[slot] = Some(v);
        v
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let (g, b) = (self.w(n.gain), self.w(n.bias));
        self.g.layer_norm(x, g, b)
    }

    /// `x · (W̄ + B_lora·A)ᵀ + bias`, with the delta applied as two thin
    /// products.
    fn proj(&mut self, x: Var, layer: usize, p: Proj, mode: Mode) -> Var {
        let slots = &self.p.layout().layers[layer];
        let lin = slots.linear(p);
        let lora = slots.lora(p, mode);
        let w = self.w(lin.weight);
        let mut y = self.g.matmul_nt(x, w);
        if let Some(pair) = lora {
            let a = self.w(pair.a);
            let b = self.w(pair.b);
            let t = self.g.matmul_nt(x, a);
            let d = self.g.matmul_nt(t, b);
            y = self.g.add(y, d);
        }
        let bias = self.w(lin.bias);
        self.g.add_bias(y, bias)
    }

    /// Projected encoder frames plus frame positions, `T' x d`.
    pub fn memory(&mut self, frames: &Mat) -> Var {
        let d = self.p.hyper().d_model;
        let f = self.g.constant(frames.clone());
        let lin = self.p.layout().memory;
        let w = self.w(lin.weight);
        let b = self.w(lin.bias);
        let m = self.g.matmul_nt(f, w);
        let m = self.g.add_bias(m, b);
        let pos = self
            .g
            .constant(crate::model::params::sinusoidal(frames.rows(), d));
        self.g.add(m, pos)
    }

    /// Per-layer cross-attention keys and values over `memory`.
    pub fn cross_kv(&mut self, memory: Var, mode: Mode) -> Vec<(Var, Var)> {
        (0..self.p.hyper().layers)
            .map(|l| {
                let k = self.proj(memory, l, Proj::CrossK, mode);
                let v = self.proj(memory, l, Proj::CrossV, mode);
                (k, v)
            })
            .collect()
    }

    /// Final normalized hidden states, `L x d`.
    pub fn hidden(
        &mut self,
        mode: Mode,
        kv: &[(Var, Var)],
        tokens: &[TokenId],
        plan: &AttentionMaskPlan,
    ) -> Var {
        let hy = *self.p.hyper();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| (!plan.is_masked(pos)).then_some(t))
            .collect();
        let emb = self.w(self.p.layout().token_emb);
        let x = self.g.embed(emb, ids);
        let mut pos = Mat::zeros(tokens.len(), hy.d_model);
        for r in 0..tokens.len() {
            pos.row_mut(r).copy_from_slice(self.p.positions().row(r));
        }
        let pos = self.g.constant(pos);
        let mut x = self.g.add(x, pos);
        let self_mask = plan.key_mask();
        for (l, &(ck, cv)) in kv.iter().enumerate() {
            let slots = self.p.layout().layers[l].clone();

            let h = self.norm(x, slots.norm_self);
            let q = self.proj(h, l, Proj::SelfQ, mode);
            let k = self.proj(h, l, Proj::SelfK, mode);
            let v = self.proj(h, l, Proj::SelfV, mode);
            let a = self.g.attention(q, k, v, hy.heads, self_mask.clone());
            let o = self.proj(a, l, Proj::SelfO, mode);
            x = self.g.add(x, o);

            let h = self.norm(x, slots.norm_cross);
            let q = self.proj(h, l, Proj::CrossQ, mode);
            let a = self.g.attention(q, ck, cv, hy.heads, KeyMask::All);
            let o = self.proj(a, l, Proj::CrossO, mode);
            x = self.g.add(x, o);

            let h = self.norm(x, slots.norm_ff);
            let f = self.proj(h, l, Proj::Ff1, mode);
            let f = self.g.relu(f);
            let o = self.proj(f, l, Proj::Ff2, mode);
            x = self.g.add(x, o);
        }
        self.norm(x, self.p.layout().norm_out)
    }

    /// Row-wise log-distributions over the vocabulary.
    pub fn output(&mut self, hidden: Var) -> Var {
        let lin = self.p.layout().out;
        let w = self.w(lin.weight);
        let b = self.w(lin.bias);
        let y = self.g.matmul_nt(hidden, w);
        let y = self.g.add_bias(y, b);
        self.g.log_softmax(y)
    }

    /// CTC head log-posteriors, `T' x V`.
    pub fn ctc_head(&mut self, frames: &Mat) -> Var {
        let f = self.g.constant(frames.clone());
        let lin = self.p.layout().ctc_head;
        let w = self.w(lin.weight);
        let b = self.w(lin.bias);
        let y = self.g.matmul_nt(f, w);
        let y = self.g.add_bias(y, b);
        self.g.log_softmax(y)
    }
}

pub(crate) fn check_tokens(p: &ToyDecoderParams, tokens: &[TokenId]) -> Result<()> {
    let h = p.hyper();
    if tokens.is_empty() {
        return Err(Error::invalid("decoder input must at least hold sos"));
    }
    if tokens.len() > h.max_len {
        return Err(Error::invalid(format!(
            "decoder input length {} exceeds max_len {}",
            tokens.len(),
            h.max_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= h.vocab) {
        return Err(Error::invalid(format!("token id {t} outside vocabulary")));
    }
    Ok(())
}

fn check_enc(p: &ToyDecoderParams, enc: &EncoderOutput) -> Result<()> {
    if enc.dim() != p.hyper().feat_dim {
        return Err(Error::invalid(format!(
            "encoder dim {} does not match model feat_dim {}",
            enc.dim(),
            p.hyper().feat_dim
        )));
    }
    Ok(())
}

/// Inference-time decoder bound to one utterance and one mode; the
/// cross-attention keys and values are computed once.
pub struct DecoderSession<'a> {
    params: &'a ToyDecoderParams,
    mode: Mode,
    kv: Vec<(Mat, Mat)>,
}

impl<'a> DecoderSession<'a> {
    pub fn new(params: &'a ToyDecoderParams, enc: &EncoderOutput, mode: Mode) -> Result<Self> {
        check_enc(params, enc)?;
        let mut ctx = Ctx::new(params);
        let mem = ctx.memory(enc.frames());
        let kv = ctx
            .cross_kv(mem, mode)
            .into_iter()
            .map(|(k, v)| (ctx.g.value(k).clone(), ctx.g.value(v).clone()))
            .collect();
        Ok(Self { params, mode, kv })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn run(&self, tokens: &[TokenId], plan: &AttentionMaskPlan, rows: Option<Vec<usize>>) -> Mat {
        let mut ctx = Ctx::new(self.params);
        let kv: Vec<_> = self
            .kv
            .iter()
            .map(|(k, v)| (ctx.g.constant(k.clone()), ctx.g.constant(v.clone())))
            .collect();
        let mut h = ctx.hidden(self.mode, &kv, tokens, plan);
        if let Some(rows) = rows {
            h = ctx.g.select_rows(h, rows);
        }
        let out = ctx.output(h);
        ctx.g.value(out).clone()
    }

    /// Causal pass; row `j` is the distribution of the token following
    /// `tokens[..=j]`.
    pub fn forward_causal(&self, tokens: &[TokenId]) -> Result<Mat> {
        check_tokens(self.params, tokens)?;
        Ok(self.run(tokens, &AttentionMaskPlan::causal(tokens.len()), None))
    }

    /// Like [`forward_causal`](Self::forward_causal) but only the rows in
    /// `rows` are projected to the vocabulary.
    pub fn forward_causal_rows(&self, tokens: &[TokenId], rows: Vec<usize>) -> Result<Mat> {
        check_tokens(self.params, tokens)?;
        if rows.iter().any(|&r| r >= tokens.len()) {
            return Err(Error::invalid("requested row outside input"));
        }
        Ok(self.run(tokens, &AttentionMaskPlan::causal(tokens.len()), Some(rows)))
    }

    /// Block-masked pass; one row per masked slot, in position order.
    pub fn forward_masked(&self, tokens: &[TokenId], plan: &AttentionMaskPlan) -> Result<Mat> {
        check_tokens(self.params, tokens)?;
        if plan.len() != tokens.len() {
            return Err(Error::invalid("mask plan length differs from input length"));
        }
        let Some(range) = plan.masked() else {
            return Err(Error::invalid("AMD pass needs a non-empty masked block"));
        };
        Ok(self.run(tokens, plan, Some(range.collect())))
    }
}

/// `P_AR(y_j | y_<j, X)` for every position of a sos-prefixed input.
pub fn forward_ar(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    tokens: &[TokenId],
) -> Result<Mat> {
    DecoderSession::new(params, enc, Mode::Ar)?.forward_causal(tokens)
}

/// Backbone-only causal pass (no delta applied).
pub fn forward_backbone(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    tokens: &[TokenId],
) -> Result<Mat> {
    DecoderSession::new(params, enc, Mode::Backbone)?.forward_causal(tokens)
}

/// `P_AMD(y_j | left context, right context, X)` at each masked slot.
pub fn forward_amd(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
    tokens: &[TokenId],
    plan: &AttentionMaskPlan,
) -> Result<Mat> {
    DecoderSession::new(params, enc, Mode::Amd)?.forward_masked(tokens, plan)
}

/// CTC head log-posteriors for an utterance.
pub fn ctc_posteriors(
    params: &ToyDecoderParams,
    enc: &EncoderOutput,
) -> Result<crate::ctc::CtcPosteriors> {
    check_enc(params, enc)?;
    let mut ctx = Ctx::new(params);
    let lp = ctx.ctc_head(enc.frames());
    crate::ctc::CtcPosteriors::new(ctx.g.value(lp).clone())
}
