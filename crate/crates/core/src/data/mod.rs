//! Synthetic token-to-frames task standing in for a speech corpus.
//!
//! Label sequences come from a fixed first-order Markov chain without
//! self-transitions. Each label is rendered as `f` frames of its codebook
//! vector, plus `context_weight` times a second codebook's vector for the
//! preceding label (the left context a real encoder would carry), plus
//! Gaussian noise. Values are rounded to `f32` so the feature files
//! round-trip exactly.

pub mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::blocks::stream_rng;
use crate::types::{EncoderOutput, TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// labels, specials excluded
    pub vocab_size: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    pub frames_lo: usize,
    pub frames_hi: usize,
    pub feat_dim: usize,
    /// norm of every codebook vector
    pub amplitude: f64,
    /// scale of the preceding label's context vector
    pub context_weight: f64,
    pub noise_std: f64,
    pub frame_period_s: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            len_lo: 28,
            len_hi: 40,
            frames_lo: 3,
            frames_hi: 3,
            feat_dim: 24,
            amplitude: 4.0,
            context_weight: 0.5,
            noise_std: 0.8,
            frame_period_s: 0.04,
            train: 600,
            dev: 50,
            test: 200,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(
                "synthetic vocabulary needs at least two labels",
            ));
        }
        if self.len_lo == 0 || self.len_hi < self.len_lo {
            return Err(Error::config(
                "length range must satisfy 1 <= len_lo <= len_hi",
            ));
        }
        if self.frames_lo == 0 || self.frames_hi < self.frames_lo {
            return Err(Error::config(
                "frame range must satisfy 1 <= frames_lo <= frames_hi",
            ));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("feat_dim must be positive"));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::config("amplitude must be positive"));
        }
        if !(self.context_weight.is_finite() && self.context_weight >= 0.0) {
            return Err(Error::config(
                "context_weight must be finite and non-negative",
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        if !(self.frame_period_s.is_finite() && self.frame_period_s > 0.0) {
            return Err(Error::config("frame_period_s must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub reference: Vec<TokenId>,
    pub enc: EncoderOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub frame_period_s: f64,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<Utterance> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

/// Row-stochastic label transition matrix with an empty diagonal.
pub struct MarkovChain {
    transitions: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, u64::MAX, 0);
        let normal = Normal::<f64>::new(0.0, 1.5).expect("valid std");
        let transitions = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            normal.sample(&mut rng).exp()
                        }
                    })
                    .collect();
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
                row
            })
            .collect();
        Self { transitions }
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let n = self.transitions.len();
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..n);
        out.push(cur);
        while out.len() < len {
            let u: f64 = rng.random();
            let row = &self.transitions[cur];
            let mut acc = 0.0;
            let mut next = row.iter().rposition(|&p| p > 0.0).expect("non-empty row");
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            cur = next;
            out.push(cur);
        }
        out
    }
}

/// Per-label feature vectors of norm `amplitude`: scaled one-hot when
/// `feat_dim >= n`, otherwise random directions.
pub fn codebook(n: usize, feat_dim: usize, amplitude: f64, seed: u64) -> Mat {
    if feat_dim >= n {
        let mut m = Mat::zeros(n, feat_dim);
        for i in 0..n {
            m.set(i, i, amplitude);
        }
        m
    } else {
        random_codebook(n, feat_dim, amplitude, seed, u64::MAX - 1)
    }
}

fn random_codebook(n: usize, feat_dim: usize, amplitude: f64, seed: u64, stream: u64) -> Mat {
    let mut m = Mat::zeros(n, feat_dim);
    let mut rng = stream_rng(seed, stream, 0);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    for i in 0..n {
        let row = m.row_mut(i);
        row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x *= amplitude / norm);
    }
    m
}

/// Left-context vectors, random directions of norm `amplitude`.
pub fn context_codebook(n: usize, feat_dim: usize, amplitude: f64, seed: u64) -> Mat {
    random_codebook(n, feat_dim, amplitude, seed, u64::MAX - 2)
}

struct Books {
    own: Mat,
    context: Mat,
}

fn render(
    labels: &[usize],
    books: &Books,
    spec: &SyntheticTaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, &l) in labels.iter().enumerate() {
        let mut mean = books.own.row(l).to_vec();
        if i > 0 {
            for (m, c) in mean.iter_mut().zip(books.context.row(labels[i - 1])) {
                *m += spec.context_weight * c;
            }
        }
        let f = rng.random_range(spec.frames_lo..=spec.frames_hi);
        for _ in 0..f {
            for &c in &mean {
                let n = if spec.noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push((c + n) as f32 as f64);
            }
            rows += 1;
        }
    }
    Ok(Mat::from_vec(rows, spec.feat_dim, data))
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    chain: &MarkovChain,
    books: &Books,
    split: Split,
    count: usize,
) -> Result<Vec<Utterance>> {
    // label k of the chain is vocab id k + 3 (after blank, sos, eos)
    const OFFSET: usize = 3;
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, split.stream(), i as u64);
            let len = rng.random_range(spec.len_lo..=spec.len_hi);
            let labels = chain.sample(&mut rng, len);
            let frames = render(&labels, books, spec, &mut rng)?;
            Ok(Utterance {
                id: i as u32,
                reference: labels.iter().map(|l| l + OFFSET).collect(),
                enc: EncoderOutput::new(frames, spec.frame_period_s)?,
            })
        })
        .collect()
}

/// Deterministic corpus for `spec`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = Vocab::synthetic(spec.vocab_size);
    let chain = MarkovChain::new(spec.vocab_size, spec.seed);
    let (n, d, a) = (spec.vocab_size, spec.feat_dim, spec.amplitude);
    let books = Books {
        own: codebook(n, d, a, spec.seed),
        context: context_codebook(n, d, a, spec.seed),
    };
    Ok(Corpus {
        vocab,
        frame_period_s: spec.frame_period_s,
        train: generate_split(spec, &chain, &books, Split::Train, spec.train)?,
        dev: generate_split(spec, &chain, &books, Split::Dev, spec.dev)?,
        test: generate_split(spec, &chain, &books, Split::Test, spec.test)?,
    })
}
