//! Minimal reverse-mode tape over [`Mat`] values.
//!
//! Every node owns its forward value; `backward` walks the tape once in
//! reverse from a scalar root. Only the ops the toy decoder needs exist.

use crate::linalg::{log_softmax_row, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys a query may attend to.
#[derive(Clone, Debug)]
pub enum KeyMask {
    /// every key
    All,
    /// keys `k <= q`
    Causal,
    /// every key outside `[start, end)`
    ExcludeRange { start: usize, end: usize },
}

impl KeyMask {
    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match *self {
            KeyMask::All => true,
            KeyMask::Causal => k <= q,
            KeyMask::ExcludeRange { start, end } => k < start || k >= end,
        }
    }
}

enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// per (head, query): (key index, prob) pairs over allowed keys
        probs: Vec<Vec<(usize, f64)>>,
    },
    Embed {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    SelectRows(Var, Vec<usize>),
    LogSoftmax(Var),
    PickSum {
        x: Var,
        picks: Vec<(usize, usize)>,
        scale: f64,
    },
    /// scalar whose gradient w.r.t. `x` was computed externally
    External {
        x: Var,
        grad: Mat,
    },
    SumScalars(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// leaf var -> parameter slot
    params: Vec<(Var, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// A leaf whose gradient is reported under parameter slot `slot`.
    pub fn param(&mut self, slot: usize, m: &Mat) -> Var {
        let v = self.push(m.clone(), Op::Leaf);
        self.params.push((v, slot));
        v
    }

    /// `x · wᵀ`
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).matmul_nt(self.value(w));
        self.push(out, Op::MatMulNt(x, w))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, out.cols()));
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention restricted by `mask`.
    ///
    /// Disallowed keys are skipped outright, so they carry exactly zero
    /// weight; a query with no allowed key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: KeyMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        assert_eq!(d % heads, 0);
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), (lk, d));
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads * lq);
        let mut scores: Vec<(usize, f64)> = Vec::with_capacity(lk);
        for h in 0..heads {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..lq {
                scores.clear();
                let qi = &qv.row(i)[cs.clone()];
                for j in 0..lk {
                    if mask.allows(i, j) {
                        let kj = &kv.row(j)[cs.clone()];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push((j, s * inv));
                    }
                }
                let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    s.1 = (s.1 - m).exp();
                    z += s.1;
                }
                let orow = &mut out.row_mut(i)[cs.clone()];
                for s in scores.iter_mut() {
                    s.1 /= z;
                    let vj = &vv.row(s.0)[cs.clone()];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += s.1 * x;
                    }
                }
                probs.push(scores.clone());
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Rows of `table` by id; `None` yields a zero row.
    pub fn embed(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                out.row_mut(r).copy_from_slice(t.row(*id));
            }
        }
        self.push(out, Op::Embed { table, ids })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols());
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows(x, rows))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            log_softmax_row(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// `scale · Σ x[r, c]` over `picks`.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, usize)>, scale: f64) -> Var {
        let xv = self.value(x);
        let s: f64 = picks.iter().map(|&(r, c)| xv.get(r, c)).sum();
        self.push(
            Mat::from_vec(1, 1, vec![scale * s]),
            Op::PickSum { x, picks, scale },
        )
    }

    pub fn external(&mut self, x: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape());
        self.push(Mat::from_vec(1, 1, vec![value]), Op::External { x, grad })
    }

    pub fn sum_scalars(&mut self, xs: Vec<Var>) -> Var {
        let s: f64 = xs.iter().map(|&x| self.scalar(x)).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumScalars(xs))
    }

    /// Back-propagates from the scalar `root`; returns `(slot, grad)` for
    /// every parameter leaf that received a gradient.
    pub fn backward(&self, root: Var) -> Vec<(usize, Mat)> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                }
                Op::MatMulNt(x, w) => {
                    let gx = gy.matmul(self.value(*w));
                    let gw = gy.matmul_tn(self.value(*x));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Mat::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in gb.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, gy);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Scale(x, c) => {
                    let mut g = gy;
                    g.scale(*c);
                    acc(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let mut g = gy;
                    for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = gy.shape();
                    let g = self.value(*gain).row(0);
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gyr = gy.row(r);
                        let xh = xhat.row(r);
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for c in 0..cols {
                            gg.row_mut(0)[c] += gyr[c] * xh[c];
                            gb.row_mut(0)[c] += gyr[c];
                            let gxh = gyr[c] * g[c];
                            mean_g += gxh;
                            mean_gx += gxh * xh[c];
                        }
                        mean_g /= n;
                        mean_gx /= n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let gxh = gyr[c] * g[c];
                            out[c] = rstd[r] * (gxh - mean_g - xh[c] * mean_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (lq, d) = qv.shape();
                    let dh = d / heads;
                    let inv = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(lq, d);
                    let mut gk = Mat::zeros(kv.rows(), d);
                    let mut gv = Mat::zeros(vv.rows(), d);
                    let mut gp: Vec<f64> = Vec::new();
                    for h in 0..*heads {
                        let cs = h * dh..(h + 1) * dh;
                        for i in 0..lq {
                            let ps = &probs[h * lq + i];
                            if ps.is_empty() {
                                continue;
                            }
                            let go = &gy.row(i)[cs.clone()];
                            gp.clear();
                            let mut dotsum = 0.0;
                            for &(j, p) in ps {
                                let vj = &vv.row(j)[cs.clone()];
                                let g: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                gp.push(g);
                                dotsum += p * g;
                                let gvr = &mut gv.row_mut(j)[cs.clone()];
                                for (o, gg) in gvr.iter_mut().zip(go) {
                                    *o += p * gg;
                                }
                            }
                            let qi: Vec<f64> = qv.row(i)[cs.clone()].to_vec();
                            for (&(j, p), &g) in ps.iter().zip(&gp) {
                                let gs = p * (g - dotsum) * inv;
                                if gs == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[cs.clone()];
                                let gqr = &mut gq.row_mut(i)[cs.clone()];
                                for (o, kk) in gqr.iter_mut().zip(kj) {
                                    *o += gs * kk;
                                }
                                let gkr = &mut gk.row_mut(j)[cs.clone()];
                                for (o, qq) in gkr.iter_mut().zip(&qi) {
                                    *o += gs * qq;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows(), t.cols());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            for (o, g) in gt.row_mut(*id).iter_mut().zip(gy.row(r)) {
                                *o += g;
                            }
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SelectRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, g) in gx.row_mut(r).iter_mut().zip(gy.row(o)) {
                            *a += g;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = gy.clone();
                    for r in 0..y.rows() {
                        let s: f64 = gy.row(r).iter().sum();
                        for (o, yv) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= yv.exp() * s;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::PickSum { x, picks, scale } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let g = gy.get(0, 0) * scale;
                    for &(r, c) in picks {
                        gx.set(r, c, gx.get(r, c) + g);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::External { x, grad } => {
                    let mut g = grad.clone();
                    g.scale(gy.get(0, 0));
                    acc(&mut grads, *x, g);
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        acc(&mut grads, x, gy.clone());
                    }
                }
            }
        }

        self.params
            .iter()
            .filter_map(|&(v, slot)| grads[v.0].take().map(|g| (slot, g)))
            .collect()
    }
}
