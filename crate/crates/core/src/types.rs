//! Shared domain vocabulary: token inventory, encoder features, score
//! weights, search configuration and ranked hypothesis lists.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctc::CtcPrefixState;
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub type TokenId = usize;

/// Token inventory shared by the CTC head and both attention decoders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    blank_id: TokenId,
    sos_id: TokenId,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(
        tokens: Vec<String>,
        blank_id: TokenId,
        sos_id: TokenId,
        eos_id: TokenId,
    ) -> Result<Self> {
        let v = tokens.len();
        if blank_id >= v || sos_id >= v || eos_id >= v {
            return Err(Error::invalid(format!(
                "special ids ({blank_id}, {sos_id}, {eos_id}) out of range for {v} tokens"
            )));
        }
        if blank_id == sos_id || blank_id == eos_id || sos_id == eos_id {
            return Err(Error::invalid("blank, sos and eos ids must be distinct"));
        }
        let mut index = HashMap::with_capacity(v);
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            blank_id,
            sos_id,
            eos_id,
        })
    }

    /// `<blank>`, `<sos>`, `<eos>` followed by `n_labels` lowercase symbols.
    pub fn synthetic(n_labels: usize) -> Self {
        let mut tokens = vec![
            "<blank>".to_string(),
            "<sos>".to_string(),
            "<eos>".to_string(),
        ];
        for i in 0..n_labels {
            let t = if i < 26 {
                char::from(b'a' + i as u8).to_string()
            } else {
                format!("w{i}")
            };
            tokens.push(t);
        }
        Self::new(tokens, 0, 1, 2).expect("synthetic vocab is valid")
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn blank_id(&self) -> TokenId {
        self.blank_id
    }

    #[inline]
    pub fn sos_id(&self) -> TokenId {
        self.sos_id
    }

    #[inline]
    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.blank_id || id == self.sos_id || id == self.eos_id
    }

    /// Tokens a decoder may emit: everything but blank and sos.
    pub fn emittable(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size()).filter(move |&t| t != self.blank_id && t != self.sos_id)
    }

    /// Ordinary label ids (no specials).
    pub fn labels(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size()).filter(move |&t| !self.is_special(t))
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::invalid(format!("unknown token {t:?}")))
            })
            .collect()
    }

    /// Token strings with specials dropped.
    pub fn render(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&t| !self.is_special(t))
            .map(|&t| self.tokens[t].clone())
            .collect()
    }
}

/// Frame-synchronous encoder features, `T' x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    frames: Mat,
    frame_period_s: f64,
}

impl EncoderOutput {
    pub fn new(frames: Mat, frame_period_s: f64) -> Result<Self> {
        if frames.cols() == 0 {
            return Err(Error::invalid(
                "encoder output needs at least one feature column",
            ));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("encoder output contains non-finite values"));
        }
        if !(frame_period_s.is_finite() && frame_period_s >= 0.0) {
            return Err(Error::invalid(
                "frame period must be finite and non-negative",
            ));
        }
        Ok(Self {
            frames,
            frame_period_s,
        })
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_period_s(&self) -> f64 {
        self.frame_period_s
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.rows() as f64 * self.frame_period_s
    }
}

/// Decoding weights `λ1` (CTC), `λ2` (AR), `λ3` (AMD).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl FusionWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    /// CTC + AR baseline weighting, 0.3:0.7.
    pub fn baseline() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.7,
            lambda3: 0.0,
        }
    }

    /// CTC + AR + AMD weighting, 0.3:0.6:0.1.
    pub fn tripartite() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.6,
            lambda3: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.lambda3];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(
                "fusion weights must be finite and non-negative",
            ));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::config("at least one fusion weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda1: self.lambda1 * c,
            lambda2: self.lambda2 * c,
            lambda3: self.lambda3 * c,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::tripartite()
    }
}

impl FromStr for FusionWeights {
    type Err = Error;

    /// Colon notation, `"0.3:0.6:0.1"`; a two-part `"0.3:0.7"` leaves `λ3 = 0`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad weight {p:?} in {s:?}")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [a, b] => Self::new(*a, *b, 0.0),
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::config(format!(
                "weights must look like l1:l2 or l1:l2:l3, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for FusionWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lambda1, self.lambda2, self.lambda3)
    }
}

/// Training objective weights, `γ1` (CTC) and `γ2` (AR).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl TrainWeights {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        let w = Self { gamma1, gamma2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1.is_finite() && self.gamma2.is_finite())
            || self.gamma1 < 0.0
            || self.gamma2 < 0.0
        {
            return Err(Error::config(
                "train weights must be finite and non-negative",
            ));
        }
        if self.gamma1 + self.gamma2 <= 0.0 {
            return Err(Error::config("train weights must not both be zero"));
        }
        Ok(())
    }
}

impl Default for TrainWeights {
    fn default() -> Self {
        Self {
            gamma1: 0.3,
            gamma2: 0.7,
        }
    }
}

/// Decode-time block sizes: a fixed `B`, or `N` size-1 blocks followed by
/// size-`B` blocks. Spelled `"4"` and `"1-20-4"` respectively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockScheduleSpec {
    Fixed(usize),
    Mixed { n: usize, b: usize },
}

impl BlockScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockScheduleSpec::Fixed(0) | BlockScheduleSpec::Mixed { b: 0, .. } => {
                Err(Error::config("block size must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for BlockScheduleSpec {
    fn default() -> Self {
        BlockScheduleSpec::Fixed(1)
    }
}

impl FromStr for BlockScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(format!(
                "schedule must look like \"B\" or \"1-N-B\", got {s:?}"
            ))
        };
        let nums: Vec<usize> = s
            .trim()
            .split('-')
            .map(|p| p.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let spec = match nums.as_slice() {
            [b] => BlockScheduleSpec::Fixed(*b),
            [1, n, b] => BlockScheduleSpec::Mixed { n: *n, b: *b },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for BlockScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockScheduleSpec::Fixed(b) => write!(f, "{b}"),
            BlockScheduleSpec::Mixed { n, b } => write!(f, "1-{n}-{b}"),
        }
    }
}

impl Serialize for BlockScheduleSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockScheduleSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Beam widths, length limit, weights and block schedule for one decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k_main: usize,
    pub k1: usize,
    pub k2: usize,
    pub l_max: usize,
    pub weights: FusionWeights,
    pub schedule: BlockScheduleSpec,
    pub length_norm: bool,
}

impl SearchConfig {
    /// Greedy setting: `K_main = 1`, `K1 = K2 = 2`.
    pub fn greedy() -> Self {
        Self {
            k_main: 1,
            k1: 2,
            k2: 2,
            l_max: 64,
            weights: FusionWeights::tripartite(),
            schedule: BlockScheduleSpec::Fixed(1),
            length_norm: false,
        }
    }

    /// Beam setting: `K_main = 60`, `K1 = K2 = 75`.
    pub fn beam() -> Self {
        Self {
            k_main: 60,
            k1: 75,
            k2: 75,
            ..Self::greedy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_main == 0 || self.k1 == 0 || self.k2 == 0 {
            return Err(Error::config("k_main, k1 and k2 must be positive"));
        }
        if self.l_max == 0 {
            return Err(Error::config("l_max must be at least 1"));
        }
        self.weights.validate()?;
        self.schedule.validate()
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

/// A partial or complete label sequence with its per-decoder scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, sos excluded; ends with eos once finished.
    pub tokens: Vec<TokenId>,
    pub alpha_ctc: f64,
    pub alpha_ar: f64,
    pub alpha_amd: f64,
    pub ctc_state: CtcPrefixState,
    pub finished: bool,
}

impl Hypothesis {
    pub fn empty(ctc_state: CtcPrefixState) -> Self {
        Self {
            tokens: Vec::new(),
            alpha_ctc: 0.0,
            alpha_ar: 0.0,
            alpha_amd: 0.0,
            ctc_state,
            finished: false,
        }
    }

    pub fn score(&self, w: &FusionWeights) -> f64 {
        fused_score(self, w)
    }

    /// Label ids without the trailing eos.
    pub fn labels(&self) -> &[TokenId] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// `λ·α` with a zero weight switching the component off entirely, so a
/// disabled decoder's `-inf` does not turn into NaN.
#[inline]
fn weighted(lambda: f64, alpha: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * alpha
    }
}

pub fn fuse(alpha_ctc: f64, alpha_ar: f64, alpha_amd: f64, w: &FusionWeights) -> f64 {
    weighted(w.lambda1, alpha_ctc) + weighted(w.lambda2, alpha_ar) + weighted(w.lambda3, alpha_amd)
}

/// `λ1·α_CTC + λ2·α_AR + λ3·α_AMD`.
pub fn fused_score(h: &Hypothesis, w: &FusionWeights) -> f64 {
    fuse(h.alpha_ctc, h.alpha_ar, h.alpha_amd, w)
}

/// Total ranking order used by every pruning step: higher score first, then
/// the shorter sequence, then the lexicographically smaller id sequence.
pub fn rank_cmp(
    score_a: f64,
    tokens_a: &[TokenId],
    score_b: f64,
    tokens_b: &[TokenId],
) -> Ordering {
    score_b
        .total_cmp(&score_a)
        .then_with(|| tokens_a.len().cmp(&tokens_b.len()))
        .then_with(|| tokens_a.cmp(tokens_b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredHypothesis {
    pub hyp: Hypothesis,
    pub score: f64,
}

/// Hypotheses in descending score order, at most `k_main` long.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NBestList {
    entries: Vec<ScoredHypothesis>,
}

impl NBestList {
    pub fn from_scored(mut entries: Vec<ScoredHypothesis>, k: usize) -> Self {
        entries.sort_by(|a, b| rank_cmp(a.score, &a.hyp.tokens, b.score, &b.hyp.tokens));
        entries.truncate(k);
        Self { entries }
    }

    /// Final ranking; `length_norm` divides by the number of emitted ids.
    pub fn rank(hyps: Vec<Hypothesis>, w: &FusionWeights, k: usize, length_norm: bool) -> Self {
        let scored = hyps
            .into_iter()
            .map(|hyp| {
                let mut score = fused_score(&hyp, w);
                if length_norm && !hyp.tokens.is_empty() {
                    score /= hyp.tokens.len() as f64;
                }
                ScoredHypothesis { hyp, score }
            })
            .collect();
        Self::from_scored(scored, k)
    }

    pub fn entries(&self) -> &[ScoredHypothesis] {
        &self.entries
    }

    pub fn best(&self) -> Option<&ScoredHypothesis> {
        self.entries.first()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
