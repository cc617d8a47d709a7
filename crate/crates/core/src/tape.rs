//! Arena-backed reverse-mode differentiation over small dense vectors.
//!
//! Every node owns a contiguous slice of the value arena; a [`Var`] is a view
//! `(offset, len)` into it, so rows of a matrix node are plain sub-views.
//! Gradients live in a parallel arena with identical offsets. Parameter
//! gradients are accumulated into a [`Grads`] buffer during [`Tape::backward`].
//!
//! Evaluation order is part of the contract: affine maps accumulate
//! `sum_j W[o][j] * x[j]` from `0.0` in column order and add the bias last,
//! dot products accumulate from `0.0` in index order, and weighted row sums
//! accumulate over rows in order.

use crate::params::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub off: usize,
    pub len: usize,
}

impl Var {
    /// Row `i` of a row-major matrix with `cols` columns.
    pub fn row(self, i: usize, cols: usize) -> Var {
        debug_assert!((i + 1) * cols <= self.len);
        Var {
            off: self.off + i * cols,
            len: cols,
        }
    }

    /// Rows `[start, start + n)` of a matrix with `cols` columns.
    pub fn rows(self, start: usize, n: usize, cols: usize) -> Var {
        debug_assert!((start + n) * cols <= self.len);
        Var {
            off: self.off + start * cols,
            len: n * cols,
        }
    }

    pub fn at(self, i: usize) -> Var {
        debug_assert!(i < self.len);
        Var {
            off: self.off + i,
            len: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    RowAffine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
        rows: usize,
    },
    Affine2 {
        w: ParamId,
        b: Option<ParamId>,
        x1: Var,
        x2: Var,
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        bcast_a: bool,
    },
    Gather {
        src: Var,
        cols: usize,
        idx: Vec<usize>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, f64),
    RowScaleAdd {
        base: Var,
        s: Var,
        v: Var,
        bcast_v: bool,
    },
    RowDots {
        q: Var,
        k: Var,
        denom: f64,
    },
    Softmax(Var),
    WeightedRows {
        w: Var,
        m: Var,
    },
    MeanRows {
        m: Var,
        n: usize,
    },
    LstmCell {
        gates: Var,
        c_prev: Option<Var>,
    },
    Stack(Vec<Var>),
    MaskedSse {
        pred: Var,
        y: Var,
        mask: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    off: usize,
    len: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    grads: Vec<f64>,
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln_1p(e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.vals.clear();
        self.nodes.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.off..v.off + v.len]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.vals[v.off]
    }

    /// Gradient of the last backward pass w.r.t. a node value.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.off..v.off + v.len]
    }

    fn push(&mut self, len: usize, op: Op) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.nodes.push(Node { off, len, op });
        (Var { off, len }, off)
    }

    pub fn constant(&mut self, data: &[f64]) -> Var {
        let off = self.vals.len();
        self.vals.extend_from_slice(data);
        self.nodes.push(Node {
            off,
            len: data.len(),
            op: Op::Const,
        });
        Var {
            off,
            len: data.len(),
        }
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.push(len, Op::Const).0
    }

    /// `rows` independent affine maps `x_r -> W x_r + b` with `W` shaped `(out, in)`.
    pub fn row_affine(&mut self, p: &ParamStore, w: ParamId, b: Option<ParamId>, x: Var, rows: usize) -> Var {
        let t = p.tensor(w);
        let (out, inp) = (t.shape[0], t.shape[1]);
        assert_eq!(x.len, rows * inp, "row_affine input shape for {}", t.name);
        let (v, off) = self.push(rows * out, Op::RowAffine { w, b, x, rows });
        let wd = &t.data;
        let bd = b.map(|b| p.data(b));
        for r in 0..rows {
            let xo = x.off + r * inp;
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for j in 0..inp {
                    acc += wr[j] * self.vals[xo + j];
                }
                if let Some(bd) = bd {
                    acc += bd[o];
                }
                self.vals[off + r * out + o] = acc;
            }
        }
        v
    }

    /// `W [x1; x2] + b` for a single vector, without materializing the concat.
    pub fn affine2(&mut self, p: &ParamStore, w: ParamId, b: Option<ParamId>, x1: Var, x2: Var) -> Var {
        let t = p.tensor(w);
        let (out, inp) = (t.shape[0], t.shape[1]);
        assert_eq!(x1.len + x2.len, inp, "affine2 input width for {}", t.name);
        let (v, off) = self.push(out, Op::Affine2 { w, b, x1, x2 });
        let wd = &t.data;
        let bd = b.map(|b| p.data(b));
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for j in 0..x1.len {
                acc += wr[j] * self.vals[x1.off + j];
            }
            for j in 0..x2.len {
                acc += wr[x1.len + j] * self.vals[x2.off + j];
            }
            if let Some(bd) = bd {
                acc += bd[o];
            }
            self.vals[off + o] = acc;
        }
        v
    }

    /// Row-wise concatenation `[a_r, b_r]`; with `bcast_a` the single row `a` is repeated.
    pub fn concat(&mut self, a: Var, b: Var, rows: usize, bcast_a: bool) -> Var {
        let ca = if bcast_a { a.len } else { a.len / rows };
        let cb = b.len / rows;
        assert_eq!(b.len, rows * cb);
        let w = ca + cb;
        let (v, off) = self.push(rows * w, Op::Concat { a, b, rows, bcast_a });
        for r in 0..rows {
            let ao = if bcast_a { a.off } else { a.off + r * ca };
            for j in 0..ca {
                self.vals[off + r * w + j] = self.vals[ao + j];
            }
            for j in 0..cb {
                self.vals[off + r * w + ca + j] = self.vals[b.off + r * cb + j];
            }
        }
        v
    }

    /// Rows `src[idx[0]], src[idx[1]], ...`.
    pub fn gather(&mut self, src: Var, cols: usize, idx: Vec<usize>) -> Var {
        let n = idx.len();
        let (v, off) = self.push(n * cols, Op::Gather { src, cols, idx: Vec::new() });
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..cols {
                self.vals[off + r * cols + j] = self.vals[src.off + i * cols + j];
            }
        }
        if let Some(Node {
            op: Op::Gather { idx: slot, .. },
            ..
        }) = self.nodes.last_mut()
        {
            *slot = idx;
        }
        v
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (v, off) = self.push(x.len, op);
        for i in 0..x.len {
            self.vals[off + i] = f(self.vals[x.off + i]);
        }
        v
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::ScaleConst(x, c), |v| c * v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.len, b.len);
        let (v, off) = self.push(a.len, Op::Add(a, b));
        for i in 0..a.len {
            self.vals[off + i] = self.vals[a.off + i] + self.vals[b.off + i];
        }
        v
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.len, b.len);
        let (v, off) = self.push(a.len, Op::Mul(a, b));
        for i in 0..a.len {
            self.vals[off + i] = self.vals[a.off + i] * self.vals[b.off + i];
        }
        v
    }

    /// `out_i = base_i + s_i * v_i` over rows; with `bcast_v` the single row `v` is reused.
    pub fn row_scale_add(&mut self, base: Var, s: Var, v: Var, bcast_v: bool) -> Var {
        let n = s.len;
        let cols = base.len / n;
        assert_eq!(base.len, n * cols);
        assert_eq!(v.len, if bcast_v { cols } else { n * cols });
        let (out, off) = self.push(base.len, Op::RowScaleAdd { base, s, v, bcast_v });
        for i in 0..n {
            let si = self.vals[s.off + i];
            let vo = if bcast_v { v.off } else { v.off + i * cols };
            for j in 0..cols {
                self.vals[off + i * cols + j] = self.vals[base.off + i * cols + j] + si * self.vals[vo + j];
            }
        }
        out
    }

    /// `out_i = (q . k_i) / denom` for each row `k_i`.
    pub fn row_dots(&mut self, q: Var, k: Var, denom: f64) -> Var {
        let c = q.len;
        let n = k.len / c;
        assert_eq!(k.len, n * c);
        let (v, off) = self.push(n, Op::RowDots { q, k, denom });
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..c {
                acc += self.vals[q.off + j] * self.vals[k.off + i * c + j];
            }
            self.vals[off + i] = acc / denom;
        }
        v
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (v, off) = self.push(x.len, Op::Softmax(x));
        let xs = &self.vals[x.off..x.off + x.len];
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|&s| (s - m).exp()).collect();
        let mut sum = 0.0;
        for &ei in &e {
            sum += ei;
        }
        for (i, ei) in e.into_iter().enumerate() {
            self.vals[off + i] = ei / sum;
        }
        v
    }

    /// `sum_i w_i m_i` over the rows of `m`.
    pub fn weighted_rows(&mut self, w: Var, m: Var) -> Var {
        let n = w.len;
        let c = m.len / n;
        assert_eq!(m.len, n * c);
        let (v, off) = self.push(c, Op::WeightedRows { w, m });
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.vals[w.off + i] * self.vals[m.off + i * c + j];
            }
            self.vals[off + j] = acc;
        }
        v
    }

    /// Column means of an `n`-row matrix: `(sum_i m_i) / n`.
    pub fn mean_rows(&mut self, m: Var, n: usize) -> Var {
        let c = m.len / n;
        assert_eq!(m.len, n * c);
        let (v, off) = self.push(c, Op::MeanRows { m, n });
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.vals[m.off + i * c + j];
            }
            self.vals[off + j] = acc / n as f64;
        }
        v
    }

    /// LSTM cell on pre-activations ordered `[input, forget, output, candidate]`.
    /// Output is `[h; c]` of length `2h`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Var {
        let h = gates.len / 4;
        assert_eq!(gates.len, 4 * h);
        if let Some(c) = c_prev {
            assert_eq!(c.len, h);
        }
        let (v, off) = self.push(2 * h, Op::LstmCell { gates, c_prev });
        for j in 0..h {
            let i = sigmoid(self.vals[gates.off + j]);
            let f = sigmoid(self.vals[gates.off + h + j]);
            let o = sigmoid(self.vals[gates.off + 2 * h + j]);
            let g = self.vals[gates.off + 3 * h + j].tanh();
            let cp = c_prev.map_or(0.0, |c| self.vals[c.off + j]);
            let c = f * cp + i * g;
            self.vals[off + h + j] = c;
            self.vals[off + j] = o * c.tanh();
        }
        v
    }

    /// Concatenate equally sized vectors into a matrix.
    pub fn stack(&mut self, parts: Vec<Var>) -> Var {
        let total: usize = parts.iter().map(|p| p.len).sum();
        let (v, off) = self.push(total, Op::Stack(Vec::new()));
        let mut pos = off;
        for p in &parts {
            for j in 0..p.len {
                self.vals[pos + j] = self.vals[p.off + j];
            }
            pos += p.len;
        }
        if let Some(Node {
            op: Op::Stack(slot), ..
        }) = self.nodes.last_mut()
        {
            *slot = parts;
        }
        v
    }

    /// `sum_t mask_t (pred_t - y_t)^2` over positions with nonzero mask.
    pub fn masked_sse(&mut self, pred: Var, y: Var, mask: Var) -> Var {
        assert_eq!(pred.len, y.len);
        assert_eq!(pred.len, mask.len);
        let (v, off) = self.push(1, Op::MaskedSse { pred, y, mask });
        let mut acc = 0.0;
        for t in 0..pred.len {
            if self.vals[mask.off + t] != 0.0 {
                let d = self.vals[pred.off + t] - self.vals[y.off + t];
                acc += d * d;
            }
        }
        self.vals[off] = acc;
        v
    }

    /// Reverse sweep from a scalar `root` seeded with `seed`; parameter
    /// gradients are added into `grads`.
    pub fn backward(&mut self, root: Var, seed: f64, p: &ParamStore, grads: &mut Grads) {
        assert_eq!(root.len, 1, "backward needs a scalar root");
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        self.grads[root.off] = seed;
        let vals = &self.vals;
        for node in self.nodes.iter().rev() {
            if matches!(node.op, Op::Const) {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(node.off);
            let g = &hi[..node.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out = &vals[node.off..node.off + node.len];
            backward_node(&node.op, g, out, vals, lo, p, grads);
        }
    }
}

fn backward_node(op: &Op, g: &[f64], out: &[f64], vals: &[f64], lo: &mut [f64], p: &ParamStore, grads: &mut Grads) {
    match op {
        Op::Const => {}
        Op::RowAffine { w, b, x, rows } => {
            let t = p.tensor(*w);
            let (o_dim, inp) = (t.shape[0], t.shape[1]);
            let wd = &t.data;
            {
                let gw = grads.get_mut(*w);
                for r in 0..*rows {
                    let xo = x.off + r * inp;
                    for o in 0..o_dim {
                        let go = g[r * o_dim + o];
                        if go == 0.0 {
                            continue;
                        }
                        let gwr = &mut gw[o * inp..(o + 1) * inp];
                        let wr = &wd[o * inp..(o + 1) * inp];
                        for j in 0..inp {
                            gwr[j] += go * vals[xo + j];
                            lo[xo + j] += go * wr[j];
                        }
                    }
                }
            }
            if let Some(b) = b {
                let gb = grads.get_mut(*b);
                for r in 0..*rows {
                    for o in 0..o_dim {
                        gb[o] += g[r * o_dim + o];
                    }
                }
            }
        }
        Op::Affine2 { w, b, x1, x2 } => {
            let t = p.tensor(*w);
            let (o_dim, inp) = (t.shape[0], t.shape[1]);
            let wd = &t.data;
            {
                let gw = grads.get_mut(*w);
                for o in 0..o_dim {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let gwr = &mut gw[o * inp..(o + 1) * inp];
                    let wr = &wd[o * inp..(o + 1) * inp];
                    for j in 0..x1.len {
                        gwr[j] += go * vals[x1.off + j];
                        lo[x1.off + j] += go * wr[j];
                    }
                    for j in 0..x2.len {
                        gwr[x1.len + j] += go * vals[x2.off + j];
                        lo[x2.off + j] += go * wr[x1.len + j];
                    }
                }
            }
            if let Some(b) = b {
                let gb = grads.get_mut(*b);
                for o in 0..o_dim {
                    gb[o] += g[o];
                }
            }
        }
        Op::Concat { a, b, rows, bcast_a } => {
            let ca = if *bcast_a { a.len } else { a.len / rows };
            let cb = b.len / rows;
            let w = ca + cb;
            for r in 0..*rows {
                let ao = if *bcast_a { a.off } else { a.off + r * ca };
                for j in 0..ca {
                    lo[ao + j] += g[r * w + j];
                }
                for j in 0..cb {
                    lo[b.off + r * cb + j] += g[r * w + ca + j];
                }
            }
        }
        Op::Gather { src, cols, idx } => {
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..*cols {
                    lo[src.off + i * cols + j] += g[r * cols + j];
                }
            }
        }
        Op::Tanh(x) => {
            for i in 0..x.len {
                lo[x.off + i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }
        Op::Sigmoid(x) => {
            for i in 0..x.len {
                lo[x.off + i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }
        Op::Softplus(x) => {
            for i in 0..x.len {
                lo[x.off + i] += g[i] * sigmoid(vals[x.off + i]);
            }
        }
        Op::ScaleConst(x, c) => {
            for i in 0..x.len {
                lo[x.off + i] += g[i] * c;
            }
        }
        Op::Add(a, b) => {
            for i in 0..a.len {
                lo[a.off + i] += g[i];
                lo[b.off + i] += g[i];
            }
        }
        Op::Mul(a, b) => {
            for i in 0..a.len {
                let (av, bv) = (vals[a.off + i], vals[b.off + i]);
                lo[a.off + i] += g[i] * bv;
                lo[b.off + i] += g[i] * av;
            }
        }
        Op::RowScaleAdd { base, s, v, bcast_v } => {
            let n = s.len;
            let cols = base.len / n;
            for i in 0..n {
                let si = vals[s.off + i];
                let vo = if *bcast_v { v.off } else { v.off + i * cols };
                let mut gs = 0.0;
                for j in 0..cols {
                    let gij = g[i * cols + j];
                    lo[base.off + i * cols + j] += gij;
                    gs += gij * vals[vo + j];
                    lo[vo + j] += si * gij;
                }
                lo[s.off + i] += gs;
            }
        }
        Op::RowDots { q, k, denom } => {
            let c = q.len;
            let n = k.len / c;
            for i in 0..n {
                let gi = g[i] / denom;
                for j in 0..c {
                    let qv = vals[q.off + j];
                    let kv = vals[k.off + i * c + j];
                    lo[q.off + j] += gi * kv;
                    lo[k.off + i * c + j] += gi * qv;
                }
            }
        }
        Op::Softmax(x) => {
            let mut dot = 0.0;
            for i in 0..x.len {
                dot += g[i] * out[i];
            }
            for i in 0..x.len {
                lo[x.off + i] += out[i] * (g[i] - dot);
            }
        }
        Op::WeightedRows { w, m } => {
            let n = w.len;
            let c = m.len / n;
            for i in 0..n {
                let wi = vals[w.off + i];
                let mut gw = 0.0;
                for j in 0..c {
                    gw += g[j] * vals[m.off + i * c + j];
                    lo[m.off + i * c + j] += wi * g[j];
                }
                lo[w.off + i] += gw;
            }
        }
        Op::MeanRows { m, n } => {
            let c = m.len / n;
            let inv = 1.0 / *n as f64;
            for i in 0..*n {
                for j in 0..c {
                    lo[m.off + i * c + j] += g[j] * inv;
                }
            }
        }
        Op::LstmCell { gates, c_prev } => {
            let h = gates.len / 4;
            for j in 0..h {
                let i = sigmoid(vals[gates.off + j]);
                let f = sigmoid(vals[gates.off + h + j]);
                let o = sigmoid(vals[gates.off + 2 * h + j]);
                let gg = vals[gates.off + 3 * h + j].tanh();
                let cp = c_prev.map_or(0.0, |c| vals[c.off + j]);
                let c = out[h + j];
                let tc = c.tanh();
                let gh = g[j];
                let dc = g[h + j] + gh * o * (1.0 - tc * tc);
                let d_o = gh * tc;
                let d_i = dc * gg;
                let d_g = dc * i;
                let d_f = dc * cp;
                lo[gates.off + j] += d_i * i * (1.0 - i);
                lo[gates.off + h + j] += d_f * f * (1.0 - f);
                lo[gates.off + 2 * h + j] += d_o * o * (1.0 - o);
                lo[gates.off + 3 * h + j] += d_g * (1.0 - gg * gg);
                if let Some(cv) = c_prev {
                    lo[cv.off + j] += dc * f;
                }
            }
        }
        Op::Stack(parts) => {
            let mut pos = 0;
            for p in parts {
                for j in 0..p.len {
                    lo[p.off + j] += g[pos + j];
                }
                pos += p.len;
            }
        }
        Op::MaskedSse { pred, y, mask } => {
            for t in 0..pred.len {
                if vals[mask.off + t] != 0.0 {
                    let d = vals[pred.off + t] - vals[y.off + t];
                    lo[pred.off + t] += g[0] * 2.0 * d;
                }
            }
        }
    }
}
