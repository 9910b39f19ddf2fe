//! CTC posteriors, best-path decoding, incremental prefix scoring and the
//! forward-backward loss.
//!
//! Prefix scoring keeps, per hypothesis, the forward probabilities of the
//! prefix ending at frame `t` in a non-blank (`r_n`) or blank (`r_b`) state.
//! Extending by one label is a single O(T') sweep over those vectors.

use crate::error::{Error, Result};
use crate::linalg::{argmax, log_add_exp, log_sum_exp, Mat};
use crate::types::{TokenId, Vocab};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Frame log-probabilities over the whole vocabulary, blank included.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPosteriors {
    log_probs: Mat,
}

impl CtcPosteriors {
    /// Each row must log-sum-exp to 0 within 1e-9.
    pub fn new(log_probs: Mat) -> Result<Self> {
        for (t, row) in log_probs.iter_rows().enumerate() {
            let z = log_sum_exp(row);
            if !z.is_finite() || z.abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "posterior row {t} is not normalized (logsumexp = {z})"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    /// From linear probabilities; rows are renormalized.
    pub fn from_probs(probs: &Mat) -> Result<Self> {
        let mut lp = Mat::zeros(probs.rows(), probs.cols());
        for t in 0..probs.rows() {
            let row = probs.row(t);
            let z: f64 = row.iter().sum();
            if !(z > 0.0) || row.iter().any(|p| *p < 0.0) {
                return Err(Error::invalid(format!("probability row {t} is invalid")));
            }
            for (o, p) in lp.row_mut(t).iter_mut().zip(row) {
                *o = (p / z).ln();
            }
        }
        Self::new(lp)
    }

    pub fn log_probs(&self) -> &Mat {
        &self.log_probs
    }

    pub fn num_frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols()
    }
}

/// Best path: frame argmax (lowest id on ties), merge repeats, drop blanks.
pub fn ctc_greedy(post: &CtcPosteriors, vocab: &Vocab) -> Vec<TokenId> {
    let blank = vocab.blank_id();
    let mut out = Vec::new();
    let mut prev = None;
    for row in post.log_probs.iter_rows() {
        let best = argmax(row).expect("non-empty vocabulary");
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Forward variables of one prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CtcPrefixState {
    /// log P(prefix, frames 0..=t, last frame emits the prefix's last label)
    pub r_n: Vec<f64>,
    /// log P(prefix, frames 0..=t, last frame emits blank)
    pub r_b: Vec<f64>,
    pub last: Option<TokenId>,
}

impl CtcPrefixState {
    /// Probability that the frames are fully explained by exactly this prefix.
    pub fn complete_log_prob(&self) -> f64 {
        match (self.r_n.last(), self.r_b.last()) {
            (Some(&n), Some(&b)) => log_add_exp(n, b),
            // zero frames: only the empty sequence is possible
            _ if self.last.is_none() => 0.0,
            _ => NEG_INF,
        }
    }
}

/// State for the empty prefix, whose prefix score is 0.
pub fn ctc_prefix_init(post: &CtcPosteriors, vocab: &Vocab) -> CtcPrefixState {
    let blank = vocab.blank_id();
    let t_len = post.num_frames();
    let mut r_b = Vec::with_capacity(t_len);
    let mut acc = 0.0;
    for t in 0..t_len {
        acc += post.log_probs.get(t, blank);
        r_b.push(acc);
    }
    CtcPrefixState {
        r_n: vec![NEG_INF; t_len],
        r_b,
        last: None,
    }
}

/// Extend a prefix by `tok`, returning the new state and its prefix score.
///
/// Extending with eos returns the probability of the prefix as a complete
/// sequence; the returned state is then a copy of the input.
pub fn ctc_prefix_extend(
    state: &CtcPrefixState,
    tok: TokenId,
    post: &CtcPosteriors,
    vocab: &Vocab,
) -> Result<(CtcPrefixState, f64)> {
    let blank = vocab.blank_id();
    if tok == blank {
        return Err(Error::invalid("cannot extend a CTC prefix with blank"));
    }
    if tok >= post.vocab_size() {
        return Err(Error::invalid(format!(
            "token {tok} outside posterior vocabulary"
        )));
    }
    if tok == vocab.eos_id() {
        return Ok((state.clone(), state.complete_log_prob()));
    }
    let lp = &post.log_probs;
    let t_len = post.num_frames();
    let mut r_n = vec![NEG_INF; t_len];
    let mut r_b = vec![NEG_INF; t_len];
    if t_len == 0 {
        let st = CtcPrefixState {
            r_n,
            r_b,
            last: Some(tok),
        };
        return Ok((st, NEG_INF));
    }
    let repeat = state.last == Some(tok);
    // mass of the old prefix that may be followed by a fresh `tok` emission
    let phi = |t: usize| {
        if repeat {
            state.r_b[t]
        } else {
            log_add_exp(state.r_n[t], state.r_b[t])
        }
    };
    r_n[0] = if state.last.is_none() {
        lp.get(0, tok)
    } else {
        NEG_INF
    };
    let mut psi = r_n[0];
    for t in 1..t_len {
        let p = phi(t - 1);
        let emit = lp.get(t, tok);
        r_n[t] = log_add_exp(r_n[t - 1], p) + emit;
        r_b[t] = log_add_exp(r_n[t - 1], r_b[t - 1]) + lp.get(t, blank);
        psi = log_add_exp(psi, p + emit);
    }
    let st = CtcPrefixState {
        r_n,
        r_b,
        last: Some(tok),
    };
    Ok((st, psi))
}

/// `log P_CTC(labels | X)` for a complete label sequence.
pub fn ctc_sequence_log_prob(
    post: &CtcPosteriors,
    labels: &[TokenId],
    vocab: &Vocab,
) -> Result<f64> {
    let mut st = ctc_prefix_init(post, vocab);
    for &y in labels {
        st = ctc_prefix_extend(&st, y, post, vocab)?.0;
    }
    Ok(st.complete_log_prob())
}

/// Negative log-likelihood of a reference, or the infeasible marker when no
/// alignment of the reference fits in the available frames.
#[derive(Clone, Debug, PartialEq)]
pub enum CtcLoss {
    Finite {
        loss: f64,
        /// d loss / d log_probs, same shape as the posterior matrix.
        grad: Mat,
    },
    Infeasible,
}

impl CtcLoss {
    pub fn value(&self) -> f64 {
        match self {
            CtcLoss::Finite { loss, .. } => *loss,
            CtcLoss::Infeasible => f64::INFINITY,
        }
    }
}

/// Forward-backward CTC loss over raw log-probability inputs.
///
/// The gradient treats every entry of `log_probs` as an independent input,
/// i.e. `-occupancy(t, k)`; chaining through a softmax is the caller's job.
pub fn ctc_loss(log_probs: &Mat, reference: &[TokenId], blank: TokenId) -> Result<CtcLoss> {
    if reference.iter().any(|&y| y == blank) {
        return Err(Error::invalid("CTC reference must not contain blank"));
    }
    if let Some(&y) = reference.iter().find(|&&y| y >= log_probs.cols()) {
        return Err(Error::invalid(format!(
            "reference token {y} outside vocabulary"
        )));
    }
    let t_len = log_probs.rows();
    let repeats = reference.windows(2).filter(|w| w[0] == w[1]).count();
    if reference.len() + repeats > t_len {
        return Ok(CtcLoss::Infeasible);
    }
    // extended label sequence: blank y1 blank y2 ... yL blank
    let s_len = 2 * reference.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { reference[s / 2] };
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && reference[s / 2] != reference[s / 2 - 1];

    if t_len == 0 {
        // only reachable with an empty reference: P = 1
        return Ok(CtcLoss::Finite {
            loss: 0.0,
            grad: Mat::zeros(0, log_probs.cols()),
        });
    }

    let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
    alpha[0][0] = log_probs.get(0, blank);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add_exp(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_add_exp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + log_probs.get(t, label(s));
        }
    }
    let mut beta = vec![vec![NEG_INF; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = log_probs.get(t_len - 1, label(s_len - 1));
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = log_probs.get(t_len - 1, label(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add_exp(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + log_probs.get(t, label(s));
        }
    }
    let end = if s_len > 1 {
        log_add_exp(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2])
    } else {
        alpha[t_len - 1][s_len - 1]
    };
    if end == NEG_INF {
        return Ok(CtcLoss::Infeasible);
    }
    // alpha and beta both include the emission at t, so occupancy divides it out once
    let mut grad = Mat::zeros(t_len, log_probs.cols());
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t][s] + beta[t][s];
            if ab == NEG_INF {
                continue;
            }
            let k = label(s);
            let occ = (ab - log_probs.get(t, k) - end).exp();
            let g = grad.get(t, k) - occ;
            grad.set(t, k, g);
        }
    }
    Ok(CtcLoss::Finite { loss: -end, grad })
}
