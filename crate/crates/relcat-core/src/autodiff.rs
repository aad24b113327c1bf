//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes;
//! [`Tape::backward`] walks it in reverse and accumulates gradients.
//! Attention and graph aggregation are fused ops with hand-written
//! adjoints so the tape never materializes per-edge feature matrices.
//! Every op is checked against central finite differences in the tests.

use crate::tensor::{dot, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
}

enum Op<T: Real> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// Broadcast-add a 1 x C bias row to every row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Square(Var),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    GeluTanh(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    /// Row-wise x / sqrt(|x|^2 + eps).
    RowL2Norm(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        invstd: Vec<T>,
    },
    SoftmaxRows(Var),
    /// Softmax over unmasked columns per row; fully-masked rows yield zeros.
    MaskedSoftmaxRows(Var, Vec<bool>),
    LogSoftmaxRows(Var),
    Trace(Var),
    /// Mean of input rows grouped by segment id (empty segments yield zeros).
    SegmentMean {
        x: Var,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    /// out[d] = mean over edges (s, d) of x[s]; fused gather + segment mean.
    SegmentMeanGather {
        x: Var,
        srcs: Vec<usize>,
        dsts: Vec<usize>,
        counts: Vec<usize>,
    },
    /// GATv2-style aggregation: per-edge score a . leaky_relu(t_src[s] + t_dst[d]),
    /// softmax over each destination's in-edges, output the alpha-weighted sum
    /// of t_src rows. `alphas` are saved by the forward pass.
    GatAggregate {
        t_src: Var,
        t_dst: Var,
        attn: Var,
        srcs: Vec<usize>,
        dsts: Vec<usize>,
        slope: T,
        alphas: Vec<T>,
    },
    /// Scale row i of x by w[i] (w is N x 1).
    RowScale {
        x: Var,
        w: Var,
    },
    RowwiseDot(Var, Var),
    SliceCol(Var, usize),
    SumAll(Var),
    /// Multiply every entry of x by the 1 x 1 scalar variable s.
    MulScalarVar {
        x: Var,
        s: Var,
    },
    /// Multi-head self-attention over ragged sentences. `bounds` has B+1 row
    /// offsets into the stacked token matrices; `probs` holds the softmax
    /// matrices per (sentence, head) from the forward pass.
    Mha {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bounds: Vec<usize>,
        probs: Vec<Matrix<T>>,
    },
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

pub struct Grads<T: Real> {
    g: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.g[v.0].as_ref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Per-edge attention weights of a [`Tape::gat_aggregate`] node.
    pub fn gat_alphas(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::GatAggregate { alphas, .. } => Some(alphas),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let m = self.value(a);
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), m.cols());
        let mut v = m.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, &bb) in row.iter_mut().zip(b.row(0)) {
                *x = *x + bb;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.shape(), bm.shape());
        let data = am
            .data()
            .iter()
            .zip(bm.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Matrix::from_vec(am.rows(), am.cols(), data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_tanh);
        self.push(v, Op::GeluTanh(a))
    }

    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).gather_rows(&idx);
        self.push(v, Op::Gather(a, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn row_l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..v.rows() {
            let n = (dot(m.row(r), m.row(r)) + eps).sqrt();
            let inv = if n > T::zero() { T::one() / n } else { T::zero() };
            for x in v.row_mut(r) {
                *x = *x * inv;
            }
        }
        self.push(v, Op::RowL2Norm(a, eps))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let m = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), m.cols());
        let c = m.cols();
        let cf = T::of(c as f64);
        let mut xhat = Matrix::zeros(m.rows(), c);
        let mut invstd = Vec::with_capacity(m.rows());
        let mut out = Matrix::zeros(m.rows(), c);
        for r in 0..m.rows() {
            let row = m.row(r);
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / cf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                / cf;
            let istd = T::one() / (var + eps).sqrt();
            invstd.push(istd);
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat.set(r, j, xh);
                out.set(r, j, xh * g.row(0)[j] + b.row(0)[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let m = self.value(a);
        assert_eq!(mask.len(), m.rows() * m.cols());
        let mut v = Matrix::zeros(m.rows(), m.cols());
        let c = m.cols();
        for r in 0..m.rows() {
            let row_mask = &mask[r * c..(r + 1) * c];
            if !row_mask.iter().any(|&b| b) {
                continue;
            }
            let row = m.row(r);
            let mut mx = T::neg_infinity();
            for j in 0..c {
                if row_mask[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut denom = T::zero();
            for j in 0..c {
                if row_mask[j] {
                    denom = denom + (row[j] - mx).exp();
                }
            }
            for j in 0..c {
                if row_mask[j] {
                    v.set(r, j, (row[j] - mx).exp() / denom);
                }
            }
        }
        self.push(v, Op::MaskedSoftmaxRows(a, mask))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&x| (x - mx).exp())
                .fold(T::zero(), |a, b| a + b)
                .ln()
                + mx;
            for x in row {
                *x = *x - lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), m.cols());
        let mut t = T::zero();
        for i in 0..m.rows() {
            t = t + m.get(i, i);
        }
        self.push(Matrix::from_vec(1, 1, vec![t]), Op::Trace(a))
    }

    pub fn segment_mean(&mut self, x: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let m = self.value(x);
        assert_eq!(seg.len(), m.rows());
        let mut out = Matrix::zeros(n_seg, m.cols());
        let mut counts = vec![0usize; n_seg];
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            let row = m.row(r);
            let o = out.row_mut(s);
            for (a, &b) in o.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        for s in 0..n_seg {
            if counts[s] > 0 {
                let inv = T::one() / T::of(counts[s] as f64);
                for a in out.row_mut(s) {
                    *a = *a * inv;
                }
            }
        }
        self.push(out, Op::SegmentMean { x, seg, counts })
    }

    pub fn segment_mean_gather(
        &mut self,
        x: Var,
        srcs: Vec<usize>,
        dsts: Vec<usize>,
        n_dst: usize,
    ) -> Var {
        assert_eq!(srcs.len(), dsts.len());
        let m = self.value(x);
        let mut out = Matrix::zeros(n_dst, m.cols());
        let mut counts = vec![0usize; n_dst];
        for (&s, &d) in srcs.iter().zip(&dsts) {
            counts[d] += 1;
            let row = m.row(s);
            let o = out.row_mut(d);
            for (a, &b) in o.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        for d in 0..n_dst {
            if counts[d] > 0 {
                let inv = T::one() / T::of(counts[d] as f64);
                for a in out.row_mut(d) {
                    *a = *a * inv;
                }
            }
        }
        self.push(
            out,
            Op::SegmentMeanGather {
                x,
                srcs,
                dsts,
                counts,
            },
        )
    }

    /// GATv2-weighted aggregation; returns the n_dst x C output. The fused
    /// forward stores only the per-edge attention weights.
    pub fn gat_aggregate(
        &mut self,
        t_src: Var,
        t_dst: Var,
        attn: Var,
        srcs: Vec<usize>,
        dsts: Vec<usize>,
        n_dst: usize,
        slope: T,
    ) -> Var {
        assert_eq!(srcs.len(), dsts.len());
        let ts = self.value(t_src);
        let td = self.value(t_dst);
        let a = self.value(attn);
        assert_eq!(a.cols(), 1);
        assert_eq!(a.rows(), ts.cols());
        let n_edges = srcs.len();
        let c = ts.cols();

        // Raw scores.
        let mut scores = vec![T::zero(); n_edges];
        for e in 0..n_edges {
            let sr = ts.row(srcs[e]);
            let dr = td.row(dsts[e]);
            let mut s = T::zero();
            for j in 0..c {
                let u = sr[j] + dr[j];
                let act = if u > T::zero() { u } else { u * slope };
                s = s + act * a.get(j, 0);
            }
            scores[e] = s;
        }
        // Softmax per destination segment.
        let mut seg_max = vec![T::neg_infinity(); n_dst];
        for e in 0..n_edges {
            if scores[e] > seg_max[dsts[e]] {
                seg_max[dsts[e]] = scores[e];
            }
        }
        let mut seg_sum = vec![T::zero(); n_dst];
        let mut alphas = vec![T::zero(); n_edges];
        for e in 0..n_edges {
            let v = (scores[e] - seg_max[dsts[e]]).exp();
            alphas[e] = v;
            seg_sum[dsts[e]] = seg_sum[dsts[e]] + v;
        }
        for e in 0..n_edges {
            alphas[e] = alphas[e] / seg_sum[dsts[e]];
        }
        // Weighted sum of source rows.
        let mut out = Matrix::zeros(n_dst, c);
        for e in 0..n_edges {
            let sr = ts.row(srcs[e]);
            let o = out.row_mut(dsts[e]);
            let w = alphas[e];
            for (x, &y) in o.iter_mut().zip(sr) {
                *x = *x + w * y;
            }
        }
        self.push(
            out,
            Op::GatAggregate {
                t_src,
                t_dst,
                attn,
                srcs,
                dsts,
                slope,
                alphas,
            },
        )
    }

    pub fn row_scale(&mut self, x: Var, w: Var) -> Var {
        let m = self.value(x);
        let wm = self.value(w);
        assert_eq!(wm.cols(), 1);
        assert_eq!(wm.rows(), m.rows());
        let mut v = m.clone();
        for r in 0..v.rows() {
            let s = wm.get(r, 0);
            for a in v.row_mut(r) {
                *a = *a * s;
            }
        }
        self.push(v, Op::RowScale { x, w })
    }

    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.shape(), bm.shape());
        let mut v = Matrix::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            v.set(r, 0, dot(am.row(r), bm.row(r)));
        }
        self.push(v, Op::RowwiseDot(a, b))
    }

    pub fn slice_col(&mut self, a: Var, col: usize) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            v.set(r, 0, m.get(r, col));
        }
        self.push(v, Op::SliceCol(a, col))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .copied()
            .fold(T::zero(), |x, y| x + y);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sm = self.value(s);
        assert_eq!(sm.shape(), (1, 1));
        let sv = sm.get(0, 0);
        let v = self.value(x).map(|a| a * sv);
        self.push(v, Op::MulScalarVar { x, s })
    }

    /// Multi-head self-attention over ragged sentences stacked row-wise.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bounds: Vec<usize>) -> Var {
        let qm = self.value(q);
        let km = self.value(k);
        let vm = self.value(v);
        assert_eq!(qm.shape(), km.shape());
        assert_eq!(qm.shape(), vm.shape());
        let h = qm.cols();
        assert_eq!(h % heads, 0, "hidden dim must divide into heads");
        let dh = h / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let n_sent = bounds.len() - 1;
        let mut out = Matrix::zeros(qm.rows(), h);
        let mut probs = Vec::with_capacity(n_sent * heads);
        for s in 0..n_sent {
            let (r0, r1) = (bounds[s], bounds[s + 1]);
            let len = r1 - r0;
            for head in 0..heads {
                let c0 = head * dh;
                // scores[i][j] = q_i . k_j / sqrt(dh)
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &qm.row(r0 + i)[c0..c0 + dh];
                    for j in 0..len {
                        let kj = &km.row(r0 + j)[c0..c0 + dh];
                        p.set(i, j, dot(qi, kj) * scale);
                    }
                }
                for i in 0..len {
                    softmax_in_place(p.row_mut(i));
                }
                for i in 0..len {
                    let orow = &mut out.row_mut(r0 + i)[c0..c0 + dh];
                    for j in 0..len {
                        let w = p.get(i, j);
                        let vj = &vm.row(r0 + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Mha {
                q,
                k,
                v,
                heads,
                bounds,
                probs,
            },
        )
    }

    /// Backpropagate from a 1 x 1 loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut g: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]));

        for i in (0..self.nodes.len()).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    g[i] = Some(gi);
                }
                Op::Matmul(a, b) => {
                    let bt = self.value(*b).transpose();
                    let da = gi.matmul(&bt);
                    let at = self.value(*a).transpose();
                    let db = at.matmul(&gi);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    acc(&mut g, *b, gi);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, gi.cols());
                    for r in 0..gi.rows() {
                        for (x, &y) in db.row_mut(0).iter_mut().zip(gi.row(r)) {
                            *x = *x + y;
                        }
                    }
                    acc(&mut g, *bias, db);
                    acc(&mut g, *a, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, gi.clone());
                    let mut gb = gi;
                    gb.scale_in_place(-T::one());
                    acc(&mut g, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut d = gi;
                    d.scale_in_place(*s);
                    acc(&mut g, *a, d);
                }
                Op::AddScalar(a, _) => {
                    acc(&mut g, *a, gi);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let two = T::of(2.0);
                    let data = gi
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &xv)| two * xv * d)
                        .collect();
                    acc(&mut g, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let data = gi
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&d, &yv)| d * yv)
                        .collect();
                    acc(&mut g, *a, Matrix::from_vec(y.rows(), y.cols(), data));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = gi
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &xv)| if xv > T::zero() { d } else { T::zero() })
                        .collect();
                    acc(&mut g, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let data = gi
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &xv)| if xv > T::zero() { d } else { d * *slope })
                        .collect();
                    acc(&mut g, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::GeluTanh(a) => {
                    let x = self.value(*a);
                    let data = gi
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &xv)| d * gelu_tanh_grad(xv))
                        .collect();
                    acc(&mut g, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i2) in idx.iter().enumerate() {
                        let drow = gi.row(r);
                        let arow = da.row_mut(i2);
                        for (x, &y) in arow.iter_mut().zip(drow) {
                            *x = *x + y;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut dp = Matrix::zeros(gi.rows(), pc);
                        for r in 0..gi.rows() {
                            dp.row_mut(r).copy_from_slice(&gi.row(r)[off..off + pc]);
                        }
                        acc(&mut g, p, dp);
                        off += pc;
                    }
                }
                Op::Transpose(a) => {
                    acc(&mut g, *a, gi.transpose());
                }
                Op::RowL2Norm(a, eps) => {
                    let x = self.value(*a);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let s = dot(row, row) + *eps;
                        let n = s.sqrt();
                        if n == T::zero() {
                            continue;
                        }
                        let gd = dot(row, gi.row(r));
                        let n3 = n * n * n;
                        for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = gi.row(r)[j] / n - row[j] * gd / n3;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    invstd,
                } => {
                    let gmat = self.value(*gamma);
                    let c = xhat.cols();
                    let cf = T::of(c as f64);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    let mut dx = Matrix::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let dy = gi.row(r);
                        let xh = xhat.row(r);
                        for j in 0..c {
                            dgamma.row_mut(0)[j] = dgamma.row(0)[j] + dy[j] * xh[j];
                            dbeta.row_mut(0)[j] = dbeta.row(0)[j] + dy[j];
                        }
                        // dxhat and its row statistics
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = dy[j] * gmat.row(0)[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let dxh = dy[j] * gmat.row(0)[j];
                            dx.set(r, j, invstd[r] * (dxh - m1 - xh[j] * m2));
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *gamma, dgamma);
                    acc(&mut g, *beta, dbeta);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = gi.row(r);
                        let s = dot(yr, dr);
                        for j in 0..y.cols() {
                            da.set(r, j, yr[j] * (dr[j] - s));
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::MaskedSoftmaxRows(a, _mask) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = gi.row(r);
                        let s = dot(yr, dr);
                        for j in 0..y.cols() {
                            da.set(r, j, yr[j] * (dr[j] - s));
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dr = gi.row(r);
                        let dsum = dr.iter().copied().fold(T::zero(), |x, v| x + v);
                        for j in 0..y.cols() {
                            let p = y.get(r, j).exp();
                            da.set(r, j, dr[j] - p * dsum);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Trace(a) => {
                    let n = self.value(*a).rows();
                    let mut da = Matrix::zeros(n, n);
                    let d = gi.get(0, 0);
                    for j in 0..n {
                        da.set(j, j, d);
                    }
                    acc(&mut g, *a, da);
                }
                Op::SegmentMean { x, seg, counts } => {
                    let xm = self.value(*x);
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = T::one() / T::of(counts[s] as f64);
                        let grow = gi.row(s);
                        for (a2, &b2) in dx.row_mut(r).iter_mut().zip(grow) {
                            *a2 = *a2 + b2 * inv;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::SegmentMeanGather {
                    x,
                    srcs,
                    dsts,
                    counts,
                } => {
                    let xm = self.value(*x);
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for (&s, &d) in srcs.iter().zip(dsts) {
                        let inv = T::one() / T::of(counts[d] as f64);
                        let grow = gi.row(d);
                        let xrow = dx.row_mut(s);
                        for (a2, &b2) in xrow.iter_mut().zip(grow) {
                            *a2 = *a2 + b2 * inv;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::GatAggregate {
                    t_src,
                    t_dst,
                    attn,
                    srcs,
                    dsts,
                    slope,
                    alphas,
                } => {
                    let ts = self.value(*t_src);
                    let td = self.value(*t_dst);
                    let am = self.value(*attn);
                    let c = ts.cols();
                    let n_edges = srcs.len();
                    let n_dst = node.value.rows();
                    // dL/d alpha_e = d_out[dst] . t_src[src]
                    let mut galpha = vec![T::zero(); n_edges];
                    for e in 0..n_edges {
                        galpha[e] = dot(gi.row(dsts[e]), ts.row(srcs[e]));
                    }
                    // Softmax backward per destination: ds = alpha * (g - sum(alpha*g)).
                    let mut seg_dot = vec![T::zero(); n_dst];
                    for e in 0..n_edges {
                        seg_dot[dsts[e]] = seg_dot[dsts[e]] + alphas[e] * galpha[e];
                    }
                    let mut dts = Matrix::zeros(ts.rows(), c);
                    let mut dtd = Matrix::zeros(td.rows(), c);
                    let mut dattn = Matrix::zeros(c, 1);
                    for e in 0..n_edges {
                        let ds = alphas[e] * (galpha[e] - seg_dot[dsts[e]]);
                        let sr = ts.row(srcs[e]);
                        let dr = td.row(dsts[e]);
                        let gout = gi.row(dsts[e]);
                        let dsrc = dts.row_mut(srcs[e]);
                        for j in 0..c {
                            // alpha-weighted value path
                            dsrc[j] = dsrc[j] + alphas[e] * gout[j];
                        }
                        if ds != T::zero() {
                            let dsrc = dts.row_mut(srcs[e]);
                            for j in 0..c {
                                let u = sr[j] + dr[j];
                                let dact = if u > T::zero() { T::one() } else { *slope };
                                let du = ds * am.get(j, 0) * dact;
                                dsrc[j] = dsrc[j] + du;
                            }
                            let ddst = dtd.row_mut(dsts[e]);
                            for j in 0..c {
                                let u = sr[j] + dr[j];
                                let dact = if u > T::zero() { T::one() } else { *slope };
                                let du = ds * am.get(j, 0) * dact;
                                ddst[j] = ddst[j] + du;
                            }
                            for j in 0..c {
                                let u = sr[j] + dr[j];
                                let act = if u > T::zero() { u } else { u * *slope };
                                dattn.set(j, 0, dattn.get(j, 0) + ds * act);
                            }
                        }
                    }
                    acc(&mut g, *t_src, dts);
                    acc(&mut g, *t_dst, dtd);
                    acc(&mut g, *attn, dattn);
                }
                Op::RowScale { x, w } => {
                    let xm = self.value(*x);
                    let wm = self.value(*w);
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    let mut dw = Matrix::zeros(wm.rows(), 1);
                    for r in 0..xm.rows() {
                        let s = wm.get(r, 0);
                        let grow = gi.row(r);
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = grow[j] * s;
                        }
                        dw.set(r, 0, dot(grow, xm.row(r)));
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *w, dw);
                }
                Op::RowwiseDot(a, b) => {
                    let am = self.value(*a);
                    let bm = self.value(*b);
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    let mut db = Matrix::zeros(bm.rows(), bm.cols());
                    for r in 0..am.rows() {
                        let d = gi.get(r, 0);
                        for j in 0..am.cols() {
                            da.set(r, j, d * bm.get(r, j));
                            db.set(r, j, d * am.get(r, j));
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::SliceCol(a, col) => {
                    let m = self.value(*a);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        da.set(r, *col, gi.get(r, 0));
                    }
                    acc(&mut g, *a, da);
                }
                Op::SumAll(a) => {
                    let m = self.value(*a);
                    let d = gi.get(0, 0);
                    let da = Matrix::from_vec(m.rows(), m.cols(), vec![d; m.rows() * m.cols()]);
                    acc(&mut g, *a, da);
                }
                Op::MulScalarVar { x, s } => {
                    let xm = self.value(*x);
                    let sv = self.value(*s).get(0, 0);
                    let mut dx = gi.clone();
                    dx.scale_in_place(sv);
                    let ds = dot(gi.data(), xm.data());
                    acc(&mut g, *x, dx);
                    acc(&mut g, *s, Matrix::from_vec(1, 1, vec![ds]));
                }
                Op::Mha {
                    q,
                    k,
                    v,
                    heads,
                    bounds,
                    probs,
                } => {
                    let qm = self.value(*q);
                    let km = self.value(*k);
                    let vm = self.value(*v);
                    let h = qm.cols();
                    let dh = h / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qm.rows(), h);
                    let mut dk = Matrix::zeros(km.rows(), h);
                    let mut dv = Matrix::zeros(vm.rows(), h);
                    let n_sent = bounds.len() - 1;
                    for s in 0..n_sent {
                        let (r0, r1) = (bounds[s], bounds[s + 1]);
                        let len = r1 - r0;
                        for head in 0..*heads {
                            let c0 = head * dh;
                            let p = &probs[s * heads + head];
                            // dV += P^T dO ; dP = dO V^T
                            let mut dp = Matrix::zeros(len, len);
                            for i in 0..len {
                                let go = &gi.row(r0 + i)[c0..c0 + dh];
                                for j in 0..len {
                                    let w = p.get(i, j);
                                    let dvj = &mut dv.row_mut(r0 + j)[c0..c0 + dh];
                                    for (x, &y) in dvj.iter_mut().zip(go) {
                                        *x = *x + w * y;
                                    }
                                    let vj = &vm.row(r0 + j)[c0..c0 + dh];
                                    dp.set(i, j, dot(go, vj));
                                }
                            }
                            // dS = P o (dP - rowsum(dP o P))
                            for i in 0..len {
                                let mut srow = T::zero();
                                for j in 0..len {
                                    srow = srow + dp.get(i, j) * p.get(i, j);
                                }
                                for j in 0..len {
                                    let ds = p.get(i, j) * (dp.get(i, j) - srow) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let kj = &km.row(r0 + j)[c0..c0 + dh];
                                    let dqi = &mut dq.row_mut(r0 + i)[c0..c0 + dh];
                                    for (x, &y) in dqi.iter_mut().zip(kj) {
                                        *x = *x + ds * y;
                                    }
                                    let qi = &qm.row(r0 + i)[c0..c0 + dh];
                                    let dkj = &mut dk.row_mut(r0 + j)[c0..c0 + dh];
                                    for (x, &y) in dkj.iter_mut().zip(qi) {
                                        *x = *x + ds * y;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
            }
        }
        Grads { g }
    }
}

fn acc<T: Real>(g: &mut [Option<Matrix<T>>], v: Var, delta: Matrix<T>) {
    match &mut g[v.0] {
        Some(existing) => existing.add_in_place(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::of(0.7978845608028654); // sqrt(2/pi)
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = T::of(0.7978845608028654);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randm(rng: &mut StdRng, r: usize, c: usize) -> Matrix<f64> {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data)
    }

    /// Central-difference check of the backward pass for an arbitrary graph
    /// builder. All inputs become leaves; the builder must reduce to 1 x 1.
    fn fd_check(inputs: &[Matrix<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eps = 1e-6;
        let run = |ins: &[Matrix<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|m| tape.leaf(m.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).get(0, 0)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[ii])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
            for e in 0..input.data().len() {
                let mut plus = inputs.to_vec();
                plus[ii].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[ii].data_mut()[e] -= eps;
                let fd = (run(&plus) - run(&minus)) / (2.0 * eps);
                let an = analytic.data()[e];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "input {ii} elem {e}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_add_relu() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 4, 2);
        let c = randm(&mut rng, 3, 2);
        fd_check(&[a, b, c], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.add(m, v[2]);
            let r = t.relu(s);
            let sq = t.square(r);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = StdRng::seed_from_u64(2);
        let x = randm(&mut rng, 4, 6);
        let gamma = randm(&mut rng, 1, 6);
        let beta = randm(&mut rng, 1, 6);
        fd_check(&[x, gamma, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_softmax_logsoftmax_trace() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = randm(&mut rng, 5, 5);
        fd_check(&[x], |t, v| {
            let ls = t.log_softmax_rows(v[0]);
            let tr = t.trace(ls);
            t.scale(tr, -0.2)
        });
        let mut rng = StdRng::seed_from_u64(4);
        let y = randm(&mut rng, 3, 4);
        fd_check(&[y], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let sq = t.square(sm);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_masked_softmax() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = randm(&mut rng, 3, 4);
        let mask = vec![
            true, true, false, true, //
            false, false, false, false, //
            true, false, true, true,
        ];
        fd_check(&[x], |t, v| {
            let sm = t.masked_softmax_rows(v[0], mask.clone());
            let sq = t.square(sm);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_gather_concat_rownorm() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = randm(&mut rng, 4, 3);
        let y = randm(&mut rng, 3, 2);
        // weight the normalized rows so the loss is not constant
        let w = randm(&mut rng, 5, 5);
        fd_check(&[x, y, w], |t, v| {
            let gx = t.gather(v[0], vec![2, 0, 0, 3, 1]);
            let gy = t.gather(v[1], vec![1, 2, 0, 0, 2]);
            let cat = t.concat_cols(vec![gx, gy]);
            let n = t.row_l2_normalize(cat, 1e-9);
            let d = t.rowwise_dot(n, v[2]);
            let sq = t.square(d);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_segment_ops() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = randm(&mut rng, 6, 3);
        let seg = vec![0, 1, 0, 2, 1, 0];
        fd_check(&[x.clone()], |t, v| {
            let m = t.segment_mean(v[0], seg.clone(), 4);
            let sq = t.square(m);
            t.sum_all(sq)
        });
        let srcs = vec![0, 1, 2, 5, 4, 0];
        let dsts = vec![1, 1, 0, 2, 2, 2];
        fd_check(&[x], |t, v| {
            let m = t.segment_mean_gather(v[0], srcs.clone(), dsts.clone(), 4);
            let sq = t.square(m);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_gat_aggregate() {
        let mut rng = StdRng::seed_from_u64(8);
        let t_src = randm(&mut rng, 5, 4);
        let t_dst = randm(&mut rng, 3, 4);
        let attn = randm(&mut rng, 4, 1);
        let srcs = vec![0, 1, 2, 3, 4, 0];
        let dsts = vec![0, 0, 1, 1, 1, 2];
        fd_check(&[t_src, t_dst, attn], |t, v| {
            let out = t.gat_aggregate(v[0], v[1], v[2], srcs.clone(), dsts.clone(), 3, 0.2);
            let sq = t.square(out);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gat_weights_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(9);
        let t_src = randm(&mut rng, 6, 4);
        let t_dst = randm(&mut rng, 3, 4);
        let attn = randm(&mut rng, 4, 1);
        let srcs = vec![0, 1, 2, 3, 4, 5];
        let dsts = vec![0, 0, 0, 2, 2, 2];
        let mut tape = Tape::new();
        let vs = tape.leaf(t_src);
        let vd = tape.leaf(t_dst);
        let va = tape.leaf(attn);
        tape.gat_aggregate(vs, vd, va, srcs.clone(), dsts.clone(), 3, 0.2);
        let Op::GatAggregate { alphas, .. } = &tape.nodes.last().unwrap().op else {
            panic!()
        };
        let mut sums = [0.0f64; 3];
        for (e, &d) in dsts.iter().enumerate() {
            assert!(alphas[e] >= 0.0);
            sums[d] += alphas[e];
        }
        assert!((sums[0] - 1.0).abs() < 1e-12);
        assert_eq!(sums[1], 0.0);
        assert!((sums[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_attention_ops() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randm(&mut rng, 4, 3);
        let w = randm(&mut rng, 4, 1);
        fd_check(&[x.clone(), w], |t, v| {
            let s = t.row_scale(v[0], v[1]);
            let sq = t.square(s);
            t.sum_all(sq)
        });
        let y = randm(&mut rng, 4, 3);
        fd_check(&[x, y], |t, v| {
            let d = t.rowwise_dot(v[0], v[1]);
            let sq = t.square(d);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_mha() {
        let mut rng = StdRng::seed_from_u64(11);
        // two sentences of lengths 3 and 2, hidden 4, two heads
        let q = randm(&mut rng, 5, 4);
        let k = randm(&mut rng, 5, 4);
        let v = randm(&mut rng, 5, 4);
        fd_check(&[q, k, v], |t, vars| {
            let o = t.multi_head_attention(vars[0], vars[1], vars[2], 2, vec![0, 3, 5]);
            let sq = t.square(o);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_misc_elementwise() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = randm(&mut rng, 3, 3);
        let s = randm(&mut rng, 1, 1);
        fd_check(&[x.clone(), s], |t, v| {
            let e = t.exp(v[0]);
            let l = t.leaky_relu(e, 0.1);
            let gl = t.gelu(l);
            let sc = t.mul_scalar_var(gl, v[1]);
            let a = t.add_scalar(sc, 0.5);
            let sq = t.square(a);
            t.sum_all(sq)
        });
        let y = randm(&mut rng, 2, 4);
        let b = randm(&mut rng, 1, 4);
        fd_check(&[y, b], |t, v| {
            let z = t.add_row(v[0], v[1]);
            let tr = t.transpose(z);
            let sq = t.square(tr);
            t.sum_all(sq)
        });
        let u = randm(&mut rng, 3, 2);
        let w2 = randm(&mut rng, 3, 2);
        fd_check(&[u, w2], |t, v| {
            let d = t.sub(v[0], v[1]);
            let c = t.slice_col(d, 1);
            let sq = t.square(c);
            t.sum_all(sq)
        });
    }
}
