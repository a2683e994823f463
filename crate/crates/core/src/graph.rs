//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Sequences of a batch
//! are packed row-wise into one matrix and described by [`Segments`], so the
//! position-wise layers run as a single matrix product while attention and
//! recurrence stay within each sequence.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::ctc;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row spans of a packed batch: `(start, len)` per sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let spans = lengths
            .iter()
            .map(|&len| {
                let span = (start, len);
                start += len;
                span
            })
            .collect();
        Segments { spans }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.spans.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|&(_, l)| l).collect()
    }

    fn max_len(&self) -> usize {
        self.spans.iter().map(|&(_, l)| l).max().unwrap_or(0)
    }
}

struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    q_segs: Segments,
    k_segs: Segments,
    n_heads: usize,
    /// Attention probabilities per (segment, head), in that order.
    probs: Vec<Array2<f64>>,
}

struct LstmSaved {
    pre: Var,
    w_hh: Var,
    segs: Segments,
    /// Post-activation gates [N, 4h] in i, f, g, o order.
    gates: Array2<f64>,
    cell: Array2<f64>,
    cell_tanh: Array2<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SegmentMean(Var, Segments),
    Attention(Box<AttnSaved>),
    Lstm(Box<LstmSaved>),
    /// Summed cross-entropy; saved `softmax - onehot` over the picked rows.
    CrossEntropy(Var, Array2<f64>),
    /// Summed CTC negative log-likelihood; saved gradient w.r.t. the logits.
    Ctc(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    trainable: Option<&'s [bool]>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Array2<f64>>>,
}

impl<'s> Graph<'s> {
    /// A graph in which no parameter receives gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph { store, trainable: None, nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    /// A graph where parameter `id` is differentiated iff `trainable[id]`.
    pub fn training(store: &'s ParamStore, trainable: &'s [bool]) -> Self {
        Graph { trainable: Some(trainable), ..Self::inference(store) }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter. Repeated calls return the same node,
    /// so weights shared between computation paths are a single object.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.trainable.is_some_and(|t| t[id.index()]);
        let v = self.push(self.store.get(id).clone(), Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Scales row `i` of `a` by `w[i, 0]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        assert_eq!(self.shape(w), (self.shape(a).0, 1), "mul_col: shape mismatch");
        let value = self.value(a) * self.value(w);
        let rg = self.rg(&[a, w]);
        self.push(value, Op::MulCol(a, w), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x · w + b` for a `[1, out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a).view());
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row count mismatch");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    /// Mean over the rows of each segment: `[n_segments, d]`.
    pub fn segment_mean(&mut self, a: Var, segs: &Segments) -> Var {
        let av = self.value(a);
        let mut value = Array2::zeros((segs.len(), av.ncols()));
        for (i, &(start, len)) in segs.spans().iter().enumerate() {
            let m = av.slice(s![start..start + len, ..]).mean_axis(Axis(0)).expect("segment_mean: empty segment");
            value.row_mut(i).assign(&m);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SegmentMean(a, segs.clone()), rg)
    }

    /// Multi-head scaled dot-product attention, per segment. Query segment
    /// `i` attends only to key segment `i`. With `causal`, query row `r` of
    /// a segment sees key rows `0..=r` of the same segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &Segments,
        k_segs: &Segments,
        n_heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_segs.len() * n_heads);
        for (&(qs, ql), &(ks, kl)) in q_segs.spans().iter().zip(k_segs.spans()) {
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                if causal {
                    for (r, mut row) in scores.outer_iter_mut().enumerate() {
                        row.slice_mut(s![r + 1..]).fill(f64::NEG_INFINITY);
                    }
                }
                let p = softmax_rows(scores.view());
                out.slice_mut(s![qs..qs + ql, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                q_segs: q_segs.clone(),
                k_segs: k_segs.clone(),
                n_heads,
                probs,
            })),
            rg,
        )
    }

    /// Single-layer LSTM recurrence over each segment with zero initial
    /// state. `pre` holds the input contributions `x·W_ih + b` as `[N, 4h]`
    /// in gate order (input, forget, cell, output); `w_hh` is `[h, 4h]`.
    pub fn lstm(&mut self, pre: Var, w_hh: Var, segs: &Segments) -> Var {
        let prev = self.value(pre);
        let whh = self.value(w_hh);
        let hidden = whh.nrows();
        let n = prev.nrows();
        let mut gates = Array2::zeros((n, 4 * hidden));
        let mut cell = Array2::<f64>::zeros((n, hidden));
        let mut cell_tanh = Array2::<f64>::zeros((n, hidden));
        let mut out = Array2::<f64>::zeros((n, hidden));
        for t in 0..segs.max_len() {
            let rows: Vec<usize> = segs.spans().iter().filter(|&&(_, l)| l > t).map(|&(s, _)| s + t).collect();
            let mut z = prev.select(Axis(0), &rows);
            if t > 0 {
                let prev_rows: Vec<usize> = rows.iter().map(|r| r - 1).collect();
                let h_prev = out.select(Axis(0), &prev_rows);
                z += &h_prev.dot(whh);
            }
            for (j, &r) in rows.iter().enumerate() {
                let zr = z.row(j);
                for u in 0..hidden {
                    let i = sigmoid(zr[u]);
                    let f = sigmoid(zr[hidden + u]);
                    let g = zr[2 * hidden + u].tanh();
                    let o = sigmoid(zr[3 * hidden + u]);
                    let c_prev = if t > 0 { cell[[r - 1, u]] } else { 0.0 };
                    let c = f * c_prev + i * g;
                    let tc = c.tanh();
                    gates[[r, u]] = i;
                    gates[[r, hidden + u]] = f;
                    gates[[r, 2 * hidden + u]] = g;
                    gates[[r, 3 * hidden + u]] = o;
                    cell[[r, u]] = c;
                    cell_tanh[[r, u]] = tc;
                    out[[r, u]] = o * tc;
                }
            }
        }
        let rg = self.rg(&[pre, w_hh]);
        self.push(out, Op::Lstm(Box::new(LstmSaved { pre, w_hh, segs: segs.clone(), gates, cell, cell_tanh })), rg)
    }

    /// Sum over `picks` of `-log softmax(logits[row])[class]`, as a `[1,1]`.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let mut grad = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for &(row, class) in picks {
            let lp = log_softmax_row(lv.row(row).to_owned());
            total -= lp[class];
            let mut g = grad.row_mut(row);
            Zip::from(&mut g).and(&lp).for_each(|g, &l| *g += l.exp());
            g[class] -= 1.0;
        }
        let rg = self.rg(&[logits]);
        self.push(Array2::from_elem((1, 1), total), Op::CrossEntropy(logits, grad), rg)
    }

    /// Summed CTC negative log-likelihood of each segment's target, with
    /// the log-softmax over `logits` rows applied internally. `blank` is the
    /// blank class index.
    pub fn ctc_loss(&mut self, logits: Var, segs: &Segments, targets: &[Vec<usize>], blank: usize) -> Result<Var> {
        let lv = self.value(logits);
        let mut grad = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for (&(start, len), target) in segs.spans().iter().zip(targets) {
            let block = lv.slice(s![start..start + len, ..]);
            let lp = log_softmax_rows(block);
            let (nll, g) = ctc::nll_and_logit_grad(lp.view(), target, blank)?;
            total += nll;
            grad.slice_mut(s![start..start + len, ..]).assign(&g);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Array2::from_elem((1, 1), total), Op::Ctc(logits, grad), rg))
    }

    /// Runs the backward pass from a `[1,1]` output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter touched by the last backward
    /// pass, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Array2<f64>)> {
        let mut out: Vec<(ParamId, Array2<f64>)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .filter_map(|(&id, v)| self.grad(*v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if needs(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if needs(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::MulCol(a, w) => {
                if needs(*a) {
                    accumulate(grads, *a, g * self.value(*w));
                }
                if needs(*w) {
                    let gw = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(grads, *w, gw);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= g;
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if needs(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = dr.sum() / d;
                        let m2 = dr.dot(&xr) / d;
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dr)
                            .and(&xr)
                            .for_each(|o, &dv, &xv| *o = is * (dv - m1 - xv * m2));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                let sums = ga.sum_axis(Axis(1)).insert_axis(Axis(1));
                ga -= &(y * &sums);
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = g - &(node.value.mapv(f64::exp) * &sums);
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let wa = self.shape(*a).1;
                if needs(*a) {
                    accumulate(grads, *a, g.slice(s![.., ..wa]).to_owned());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.slice(s![.., wa..]).to_owned());
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::SegmentMean(a, segs) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (i, &(start, len)) in segs.spans().iter().enumerate() {
                    let row = g.row(i).mapv(|v| v / len as f64);
                    for r in start..start + len {
                        ga.row_mut(r).assign(&row);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Attention(saved) => self.backward_attention(saved, g, grads),
            Op::Lstm(saved) => self.backward_lstm(saved, &node.value, g, grads),
            Op::CrossEntropy(a, saved) | Op::Ctc(a, saved) => {
                accumulate(grads, *a, saved * g[[0, 0]]);
            }
        }
    }

    fn backward_attention(&self, saved: &AttnSaved, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let (qv, kv, vv) = (self.value(saved.q), self.value(saved.k), self.value(saved.v));
        let d = qv.ncols();
        let n_heads = saved.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        let mut p_iter = saved.probs.iter();
        for (&(qs, ql), &(ks, kl)) in saved.q_segs.spans().iter().zip(saved.k_segs.spans()) {
            for h in 0..n_heads {
                let p = p_iter.next().expect("attention probs");
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![qs..qs + ql, cols.clone()]);
                let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                dv.slice_mut(s![ks..ks + kl, cols.clone()]).scaled_add(1.0, &p.t().dot(&go));
                let dp = go.dot(&vh.t());
                let mut ds = &dp * p;
                let sums = ds.sum_axis(Axis(1)).insert_axis(Axis(1));
                ds -= &(p * &sums);
                dq.slice_mut(s![qs..qs + ql, cols.clone()]).scaled_add(scale, &ds.dot(&kh));
                dk.slice_mut(s![ks..ks + kl, cols]).scaled_add(scale, &ds.t().dot(&qh));
            }
        }
        for (var, grad) in [(saved.q, dq), (saved.k, dk), (saved.v, dv)] {
            if self.nodes[var.0].requires_grad {
                accumulate(grads, var, grad);
            }
        }
    }

    fn backward_lstm(&self, saved: &LstmSaved, out: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let whh = self.value(saved.w_hh);
        let hidden = whh.nrows();
        let n = g.nrows();
        let mut dh_buf = g.clone();
        let mut dc_buf = Array2::<f64>::zeros((n, hidden));
        let mut dpre = Array2::<f64>::zeros((n, 4 * hidden));
        let mut dwhh = Array2::<f64>::zeros(whh.dim());
        for t in (0..saved.segs.max_len()).rev() {
            let rows: Vec<usize> = saved.segs.spans().iter().filter(|&&(_, l)| l > t).map(|&(s, _)| s + t).collect();
            let mut dz = Array2::<f64>::zeros((rows.len(), 4 * hidden));
            for (j, &r) in rows.iter().enumerate() {
                for u in 0..hidden {
                    let i = saved.gates[[r, u]];
                    let f = saved.gates[[r, hidden + u]];
                    let gg = saved.gates[[r, 2 * hidden + u]];
                    let o = saved.gates[[r, 3 * hidden + u]];
                    let tc = saved.cell_tanh[[r, u]];
                    let dh = dh_buf[[r, u]];
                    let dc = dc_buf[[r, u]] + dh * o * (1.0 - tc * tc);
                    let c_prev = if t > 0 { saved.cell[[r - 1, u]] } else { 0.0 };
                    dz[[j, u]] = dc * gg * i * (1.0 - i);
                    dz[[j, hidden + u]] = dc * c_prev * f * (1.0 - f);
                    dz[[j, 2 * hidden + u]] = dc * i * (1.0 - gg * gg);
                    dz[[j, 3 * hidden + u]] = dh * tc * o * (1.0 - o);
                    if t > 0 {
                        dc_buf[[r - 1, u]] += dc * f;
                    }
                }
                dpre.row_mut(r).assign(&dz.row(j));
            }
            if t > 0 {
                let prev_rows: Vec<usize> = rows.iter().map(|r| r - 1).collect();
                let h_prev = out.select(Axis(0), &prev_rows);
                dwhh += &h_prev.t().dot(&dz);
                let dh_prev = dz.dot(&whh.t());
                for (j, &r) in prev_rows.iter().enumerate() {
                    let mut row = dh_buf.row_mut(r);
                    row += &dh_prev.row(j);
                }
            }
        }
        if self.nodes[saved.pre.0].requires_grad {
            accumulate(grads, saved.pre, dpre);
        }
        if self.nodes[saved.w_hh.0].requires_grad {
            accumulate(grads, saved.w_hh, dwhh);
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn log_softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn log_softmax_row(mut row: Array1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.mapv_inplace(|v| v - lse);
    row
}
