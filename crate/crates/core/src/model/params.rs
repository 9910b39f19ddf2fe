//! Parameter storage for the toy decoder: one frozen-able backbone plus two
//! low-rank delta sets (AR and AMD) over the same projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub vocab: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub rank: usize,
    /// positional table length; sequences incl. sos must fit
    pub max_len: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            vocab: 23,
            feat_dim: 24,
            d_model: 16,
            layers: 2,
            heads: 2,
            ffn: 64,
            rank: 4,
            max_len: 128,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab,
            self.feat_dim,
            self.d_model,
            self.layers,
            self.heads,
            self.ffn,
            self.max_len,
        ];
        if dims.iter().any(|&x| x == 0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("d_model must be divisible by heads"));
        }
        if self.rank == 0 || self.rank > self.d_model.min(self.ffn) {
            return Err(Error::config("LoRA rank must be in [1, min(d_in, d_out)]"));
        }
        Ok(())
    }
}

/// Projections that carry a low-rank delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Proj {
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    Ff1,
    Ff2,
}

impl Proj {
    pub const ALL: [Proj; 10] = [
        Proj::SelfQ,
        Proj::SelfK,
        Proj::SelfV,
        Proj::SelfO,
        Proj::CrossQ,
        Proj::CrossK,
        Proj::CrossV,
        Proj::CrossO,
        Proj::Ff1,
        Proj::Ff2,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// (d_out, d_in)
    fn dims(self, h: &Hyper) -> (usize, usize) {
        match self {
            Proj::Ff1 => (h.ffn, h.d_model),
            Proj::Ff2 => (h.d_model, h.ffn),
            _ => (h.d_model, h.d_model),
        }
    }
}

/// Which weights a forward pass uses on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Backbone,
    Ar,
    Amd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    CtcHead,
    Backbone,
    LoraAr,
    LoraAmd,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    /// r x d_in
    pub a: usize,
    /// d_out x r
    pub b: usize,
}

#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub norm_self: Norm,
    pub norm_cross: Norm,
    pub norm_ff: Norm,
    pub proj: [Linear; 10],
    pub lora_ar: [LoraPair; 10],
    pub lora_amd: [LoraPair; 10],
}

impl LayerSlots {
    pub fn linear(&self, p: Proj) -> Linear {
        self.proj[p.index()]
    }

    pub fn lora(&self, p: Proj, mode: Mode) -> Option<LoraPair> {
        match mode {
            Mode::Backbone => None,
            Mode::Ar => Some(self.lora_ar[p.index()]),
            Mode::Amd => Some(self.lora_amd[p.index()]),
        }
    }
}

/// Slot indices of every named tensor inside the flat tensor list. The
/// order of slots is the checkpoint order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub ctc_head: Linear,
    pub token_emb: usize,
    pub memory: Linear,
    pub layers: Vec<LayerSlots>,
    pub norm_out: Norm,
    pub out: Linear,
    shapes: Vec<(usize, usize)>,
    groups: Vec<ParamGroup>,
    names: Vec<String>,
}

impl Layout {
    pub fn new(h: &Hyper) -> Self {
        let mut b = LayoutBuilder::default();
        let ctc_head = b.linear("ctc_head", h.vocab, h.feat_dim, ParamGroup::CtcHead);
        let token_emb = b.push("token_emb", (h.vocab, h.d_model), ParamGroup::Backbone);
        let memory = b.linear("memory", h.d_model, h.feat_dim, ParamGroup::Backbone);
        let mut layers = Vec::with_capacity(h.layers);
        for l in 0..h.layers {
            let norm_self = b.norm(&format!("l{l}.norm_self"), h.d_model);
            let norm_cross = b.norm(&format!("l{l}.norm_cross"), h.d_model);
            let norm_ff = b.norm(&format!("l{l}.norm_ff"), h.d_model);
            let proj = Proj::ALL.map(|p| {
                let (o, i) = p.dims(h);
                b.linear(&format!("l{l}.{p:?}"), o, i, ParamGroup::Backbone)
            });
            let mut lora = |tag: &str, group| {
                Proj::ALL.map(|p| {
                    let (o, i) = p.dims(h);
                    LoraPair {
                        a: b.push(&format!("l{l}.{p:?}.{tag}.a"), (h.rank, i), group),
                        b: b.push(&format!("l{l}.{p:?}.{tag}.b"), (o, h.rank), group),
                    }
                })
            };
            let lora_ar = lora("lora_ar", ParamGroup::LoraAr);
            let lora_amd = lora("lora_amd", ParamGroup::LoraAmd);
            layers.push(LayerSlots {
                norm_self,
                norm_cross,
                norm_ff,
                proj,
                lora_ar,
                lora_amd,
            });
        }
        let norm_out = b.norm("norm_out", h.d_model);
        let out = b.linear("out", h.vocab, h.d_model, ParamGroup::Backbone);
        Layout {
            ctc_head,
            token_emb,
            memory,
            layers,
            norm_out,
            out,
            shapes: b.shapes,
            groups: b.groups,
            names: b.names,
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape(&self, slot: usize) -> (usize, usize) {
        self.shapes[slot]
    }

    pub fn group(&self, slot: usize) -> ParamGroup {
        self.groups[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    fn is_norm_gain(&self, slot: usize) -> bool {
        self.names[slot].ends_with(".gain")
    }

    fn is_bias(&self, slot: usize) -> bool {
        self.names[slot].ends_with(".bias")
    }
}

#[derive(Default)]
struct LayoutBuilder {
    shapes: Vec<(usize, usize)>,
    groups: Vec<ParamGroup>,
    names: Vec<String>,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: (usize, usize), group: ParamGroup) -> usize {
        self.shapes.push(shape);
        self.groups.push(group);
        self.names.push(name.to_string());
        self.shapes.len() - 1
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize, group: ParamGroup) -> Linear {
        Linear {
            weight: self.push(&format!("{name}.weight"), (d_out, d_in), group),
            bias: self.push(&format!("{name}.bias"), (1, d_out), group),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.push(&format!("{name}.gain"), (1, d), ParamGroup::Backbone),
            bias: self.push(&format!("{name}.bias"), (1, d), ParamGroup::Backbone),
        }
    }
}

/// Backbone `W̄`, CTC head and the two delta sets.
///
/// The effective weight of a projection in mode `m` is
/// `W̄ + B_lora · A` with `(A, B_lora)` taken from that mode's delta set.
#[derive(Clone, Debug)]
pub struct ToyDecoderParams {
    hyper: Hyper,
    layout: Layout,
    tensors: Vec<Mat>,
    positions: Mat,
}

impl PartialEq for ToyDecoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.tensors == other.tensors
    }
}

impl ToyDecoderParams {
    /// Random backbone, zero `B_lora` (so both modes start equal to the
    /// backbone), identical AR and AMD `A` factors.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(layout.len());
        for slot in 0..layout.len() {
            let (r, c) = layout.shape(slot);
            let name = layout.name(slot);
            let m = if layout.is_norm_gain(slot) {
                let mut m = Mat::zeros(r, c);
                m.fill(1.0);
                m
            } else if layout.is_bias(slot) || name.ends_with(".b") {
                Mat::zeros(r, c)
            } else {
                let std = if slot == layout.token_emb {
                    1.0
                } else {
                    1.0 / (c as f64).sqrt()
                };
                random_normal(&mut rng, r, c, std)
            };
            tensors.push(m);
        }
        let positions = sinusoidal(hyper.max_len, hyper.d_model);
        let mut out = Self {
            hyper,
            layout,
            tensors,
            positions,
        };
        // the AMD deltas start as a copy of the AR ones
        out.copy_ar_deltas_to_amd();
        Ok(out)
    }

    pub(crate) fn from_tensors(hyper: Hyper, tensors: Vec<Mat>) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        if tensors.len() != layout.len() {
            return Err(Error::invalid("tensor count does not match layout"));
        }
        for (slot, t) in tensors.iter().enumerate() {
            if t.shape() != layout.shape(slot) {
                return Err(Error::invalid(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    layout.name(slot),
                    t.shape(),
                    layout.shape(slot)
                )));
            }
        }
        let positions = sinusoidal(hyper.max_len, hyper.d_model);
        Ok(Self {
            hyper,
            layout,
            tensors,
            positions,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn tensor(&self, slot: usize) -> &Mat {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.tensors[slot]
    }

    pub fn positions(&self) -> &Mat {
        &self.positions
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Fills every `A` and `B_lora` of `mode` with N(0, std²) entries.
    pub fn randomize_deltas(&mut self, mode: Mode, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = match mode {
            Mode::Backbone => return,
            Mode::Ar => ParamGroup::LoraAr,
            Mode::Amd => ParamGroup::LoraAmd,
        };
        for slot in 0..self.layout.len() {
            if self.layout.group(slot) == group {
                let (r, c) = self.layout.shape(slot);
                self.tensors[slot] = random_normal(&mut rng, r, c, std);
            }
        }
    }

    /// Zeroes `B_lora` of `mode`, making that mode identical to the backbone.
    pub fn zero_deltas(&mut self, mode: Mode) {
        for l in 0..self.layout.layers.len() {
            for p in Proj::ALL {
                if let Some(pair) = self.layout.layers[l].lora(p, mode) {
                    self.tensors[pair.b].fill(0.0);
                }
            }
        }
    }

    /// Copies the AR delta set into the AMD delta set.
    pub fn copy_ar_deltas_to_amd(&mut self) {
        for l in 0..self.layout.layers.len() {
            for i in 0..Proj::ALL.len() {
                let (src, dst) = (
                    self.layout.layers[l].lora_ar[i],
                    self.layout.layers[l].lora_amd[i],
                );
                self.tensors[dst.a] = self.tensors[src.a].clone();
                self.tensors[dst.b] = self.tensors[src.b].clone();
            }
        }
    }

    /// Folds `mode`'s deltas into the backbone weights (`W̄ + B_lora·A`) and
    /// returns the result with all deltas zeroed.
    pub fn materialize(&self, mode: Mode) -> Self {
        let mut out = self.clone();
        for layer in &self.layout.layers {
            for p in Proj::ALL {
                if let Some(pair) = layer.lora(p, mode) {
                    let delta = self.tensors[pair.b].matmul(&self.tensors[pair.a]);
                    out.tensors[layer.linear(p).weight].add_assign(&delta);
                }
            }
        }
        out.zero_deltas(Mode::Ar);
        out.zero_deltas(Mode::Amd);
        out
    }
}

fn random_normal(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Mat {
    let n = Normal::new(0.0, std).expect("valid std");
    Mat::from_vec(r, c, (0..r * c).map(|_| n.sample(rng)).collect())
}

/// Standard sin/cos position table.
pub fn sinusoidal(len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
