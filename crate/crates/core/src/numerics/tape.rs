//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Nodes are appended in evaluation order and hold their forward value, so a
//! single reverse sweep from the loss visits every consumer before its
//! inputs. Parameters are borrowed from a [`ParamStore`] rather than copied.

use super::ops::{layer_norm_backward, layer_norm_with_cache, log_sum_exp, softmax_in_place};
use super::store::ParamStore;
use super::tensor::{matmul_into, Real, Tensor};
use crate::crf::{self, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a packed multi-sequence attention call: each segment is a run of
/// `len` consecutive rows starting at `start`. Rows attend only within their
/// own segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub clip: usize,
    pub segments: Vec<(usize, usize)>,
}

impl AttentionShape {
    /// Offset bucket for query `i` and key `j`: `clip(j - i, -k, k) + k`.
    pub fn bucket(&self, i: usize, j: usize) -> usize {
        let k = self.clip as isize;
        ((j as isize - i as isize).clamp(-k, k) + k) as usize
    }

    /// Number of attention weights across all segments and heads.
    pub fn num_weights(&self) -> usize {
        self.segments.iter().map(|&(_, n)| self.heads * n * n).sum()
    }
}

struct Attention<F> {
    q: Var,
    k: Var,
    v: Var,
    rel_k: Var,
    rel_v: Option<Var>,
    shape: AttentionShape,
    probs: Vec<F>,
    dropout: Option<Vec<F>>,
}

enum Op<F> {
    Input,
    Param(usize),
    Gather { src: Var, rows: Vec<usize> },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    MatMul { x: Var, w: Var },
    ConcatCols(Var, Var),
    Relu(Var),
    MulConst { x: Var, factor: Vec<F> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Attention(Box<Attention<F>>),
    SoftmaxXent { logits: Var, gold: Vec<Option<usize>>, probs: Vec<F> },
    CrfNll { emissions: Var, trans: Var, d_em: Vec<F>, d_tr: Vec<F> },
    Sum(Vec<Var>),
    Scale(Var, F),
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(usize),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
}

pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Tape {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id] = Some(v);
        v
    }

    /// Copies the listed rows of `src` into a new matrix.
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let s = self.value(src);
        let c = s.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(s.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data);
        self.push(out, Op::Gather { src, rows })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.len(), self.value(b).len(), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(out.cols(), b.len(), "add_row width");
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).matmul(self.value(w));
        self.push(out, Op::MatMul { x, w })
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat rows");
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(n, p + q, data);
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        self.push(out, Op::Relu(x))
    }

    /// Element-wise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<F>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.len(), factor.len());
        for (o, &f) in out.data_mut().iter_mut().zip(&factor) {
            *o *= f;
        }
        self.push(out, Op::MulConst { x, factor })
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = Vec::with_capacity(n * c);
        let mut xhat = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let (y, h, s) = layer_norm_with_cache(xv.row(r), g, b);
            data.extend(y);
            xhat.extend(h);
            inv_std.push(s);
        }
        let out = Tensor::matrix(n, c, data);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention with relative-offset key (and
    /// optionally value) embeddings. `q`, `k`, `v` are `N × h`; `rel_k` and
    /// `rel_v` are `(2·clip + 1) × (h / heads)` and shared by all heads.
    /// `dropout`, when given, multiplies the attention weights (length
    /// [`AttentionShape::num_weights`]).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel_k: Var,
        rel_v: Option<Var>,
        shape: AttentionShape,
        dropout: Option<Vec<F>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = qv.cols();
        let dh = h / shape.heads;
        assert_eq!(dh * shape.heads, h, "hidden size divisible by heads");
        let rk = self.value(rel_k).data();
        let rv = rel_v.map(|r| self.value(r).data());
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut out = Tensor::zeros(&[qv.rows(), h]);
        let mut probs = vec![F::zero(); shape.num_weights()];
        if let Some(d) = &dropout {
            assert_eq!(d.len(), probs.len(), "attention dropout mask length");
        }
        let mut base = 0;
        for &(start, n) in &shape.segments {
            for hd in 0..shape.heads {
                let col = hd * dh;
                for i in 0..n {
                    let qi = &qv.row(start + i)[col..col + dh];
                    let row = &mut probs[base + i * n..base + (i + 1) * n];
                    for (j, p) in row.iter_mut().enumerate() {
                        let kj = &kv.row(start + j)[col..col + dh];
                        let r = shape.bucket(i, j);
                        let rkr = &rk[r * dh..(r + 1) * dh];
                        let mut dot = F::zero();
                        for d in 0..dh {
                            dot += qi[d] * (kj[d] + rkr[d]);
                        }
                        *p = dot * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out.row_mut(start + i)[col..col + dh];
                    for j in 0..n {
                        let mut a = row[j];
                        if let Some(d) = &dropout {
                            a *= d[base + i * n + j];
                        }
                        let vj = &vv.row(start + j)[col..col + dh];
                        for d in 0..dh {
                            o[d] += a * vj[d];
                        }
                        if let Some(rv) = rv {
                            let r = shape.bucket(i, j);
                            for d in 0..dh {
                                o[d] += a * rv[r * dh + d];
                            }
                        }
                    }
                }
                base += n * n;
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(Attention {
                q,
                k,
                v,
                rel_k,
                rel_v,
                shape,
                probs,
                dropout,
            })),
        )
    }

    /// Attention weights (before dropout) recorded by an attention node,
    /// laid out segment by segment, head by head, row-major `n × n`.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some(&a.probs),
            _ => None,
        }
    }

    /// Summed softmax cross-entropy over rows; rows with `None` gold are skipped.
    pub fn softmax_xent(&mut self, logits: Var, gold: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), gold.len(), "one gold label per row");
        let c = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut loss = F::zero();
        for (r, g) in gold.iter().enumerate() {
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
            if let Some(g) = *g {
                assert!(g < c, "gold id {g} out of range {c}");
                let row = lv.row(r);
                loss += log_sum_exp(row) - row[g];
            }
        }
        let out = Tensor::from_vec(&[1], vec![loss]).unwrap();
        self.push(out, Op::SoftmaxXent { logits, gold, probs })
    }

    /// Summed CRF negative log-likelihood over token segments of `emissions`
    /// (`n_tok × T`). Segments run over consecutive rows.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        trans: Var,
        segments: &[(usize, usize)],
        gold: &[usize],
    ) -> Var {
        let ev = self.value(emissions);
        let t = ev.cols();
        let tm = TransitionMatrix::from_tensor(self.value(trans).clone()).expect("transition shape");
        assert_eq!(tm.num_tags(), t, "transition matrix matches tag count");
        let mut d_em = vec![F::zero(); ev.len()];
        let mut d_tr = vec![F::zero(); tm.as_slice().len()];
        let mut total = F::zero();
        for &(start, n) in segments {
            let em = &ev.data()[start * t..(start + n) * t];
            let (nll, de, dt) = crf::crf_nll(em, &tm, &gold[start..start + n]).expect("valid crf input");
            total += nll;
            for (a, b) in d_em[start * t..(start + n) * t].iter_mut().zip(de) {
                *a += b;
            }
            for (a, b) in d_tr.iter_mut().zip(dt) {
                *a += b;
            }
        }
        let out = Tensor::from_vec(&[1], vec![total]).unwrap();
        self.push(
            out,
            Op::CrfNll {
                emissions,
                trans,
                d_em,
                d_tr,
            },
        )
    }

    pub fn sum(&mut self, terms: Vec<Var>) -> Var {
        let total = terms.iter().map(|&v| self.scalar(v)).fold(F::zero(), |a, b| a + b);
        self.push(Tensor::from_vec(&[1], vec![total]).unwrap(), Op::Sum(terms))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale(x, c))
    }

    /// Back-propagates from the scalar `loss`. Returns one gradient slot per
    /// parameter of the store (`None` for parameters the loss never touched).
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor<F>>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![F::one(); self.value(loss).len()]).unwrap());
        let mut param_grads: Vec<Option<Tensor<F>>> = (0..self.params.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let gd = g.data();
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => param_grads[*id] = Some(g),
                Op::Gather { src, rows } => {
                    let dst = slot(&mut grads, *src, self.value(*src).shape());
                    let c = g.cols();
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &s) in dst[r * c..(r + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *d += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let dst = slot(&mut grads, v, g.shape());
                        for (d, &s) in dst.iter_mut().zip(gd) {
                            *d += s;
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let dx = slot(&mut grads, *x, g.shape());
                    for (d, &s) in dx.iter_mut().zip(gd) {
                        *d += s;
                    }
                    let c = g.cols();
                    let db = slot(&mut grads, *bias, self.value(*bias).shape());
                    for row in gd.chunks(c) {
                        for (d, &s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    let dx = slot(&mut grads, *x, xv.shape());
                    matmul_into(m, n, k, gd, false, wv.data(), true, dx, F::one());
                    let dw = slot(&mut grads, *w, wv.shape());
                    matmul_into(k, m, n, xv.data(), true, gd, false, dw, F::one());
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                    let n = g.rows();
                    let da = slot(&mut grads, *a, self.value(*a).shape());
                    for r in 0..n {
                        for (d, &s) in da[r * p..(r + 1) * p].iter_mut().zip(&gd[r * (p + q)..r * (p + q) + p]) {
                            *d += s;
                        }
                    }
                    let db = slot(&mut grads, *b, self.value(*b).shape());
                    for r in 0..n {
                        for (d, &s) in db[r * q..(r + 1) * q].iter_mut().zip(&gd[r * (p + q) + p..(r + 1) * (p + q)]) {
                            *d += s;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = slot(&mut grads, *x, g.shape());
                    for ((d, &s), &xi) in dx.iter_mut().zip(gd).zip(xv) {
                        if xi > F::zero() {
                            *d += s;
                        }
                    }
                }
                Op::MulConst { x, factor } => {
                    let dx = slot(&mut grads, *x, g.shape());
                    for ((d, &s), &f) in dx.iter_mut().zip(gd).zip(factor) {
                        *d += s * f;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = g.cols();
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![F::zero(); c];
                    let mut dbias = vec![F::zero(); c];
                    let mut dxhat = vec![F::zero(); c];
                    let dx = slot(&mut grads, *x, g.shape());
                    for (r, &s) in inv_std.iter().enumerate() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        layer_norm_backward(&dxhat, hr, s, &mut dx[r * c..(r + 1) * c]);
                    }
                    add_into(slot(&mut grads, *gain, self.value(*gain).shape()), &dgain);
                    add_into(slot(&mut grads, *bias, self.value(*bias).shape()), &dbias);
                }
                Op::Attention(a) => self.attention_backward(a, gd, &mut grads),
                Op::SoftmaxXent { logits, gold, probs } => {
                    let up = gd[0];
                    let c = self.value(*logits).cols();
                    let dl = slot(&mut grads, *logits, self.value(*logits).shape());
                    for (r, gl) in gold.iter().enumerate() {
                        if let Some(gl) = *gl {
                            let row = &mut dl[r * c..(r + 1) * c];
                            for (j, d) in row.iter_mut().enumerate() {
                                *d += up * probs[r * c + j];
                            }
                            row[gl] -= up;
                        }
                    }
                }
                Op::CrfNll {
                    emissions,
                    trans,
                    d_em,
                    d_tr,
                } => {
                    let up = gd[0];
                    let de = slot(&mut grads, *emissions, self.value(*emissions).shape());
                    for (d, &s) in de.iter_mut().zip(d_em) {
                        *d += up * s;
                    }
                    let dt = slot(&mut grads, *trans, self.value(*trans).shape());
                    for (d, &s) in dt.iter_mut().zip(d_tr) {
                        *d += up * s;
                    }
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        slot(&mut grads, t, &[1])[0] += gd[0];
                    }
                }
                Op::Scale(x, c) => {
                    let dx = slot(&mut grads, *x, g.shape());
                    for (d, &s) in dx.iter_mut().zip(gd) {
                        *d += s * *c;
                    }
                }
            }
        }
        param_grads
    }

    fn attention_backward(&self, a: &Attention<F>, gd: &[F], grads: &mut [Option<Tensor<F>>]) {
        let shape = &a.shape;
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let h = qv.cols();
        let dh = h / shape.heads;
        let rk = self.value(a.rel_k).data();
        let rv = a.rel_v.map(|r| self.value(r).data());
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut drk = vec![F::zero(); rk.len()];
        let mut drv = vec![F::zero(); rk.len()];

        let max_n = shape.segments.iter().map(|s| s.1).max().unwrap_or(0);
        let mut dprob = vec![F::zero(); max_n];
        let mut base = 0;
        for &(start, n) in &shape.segments {
            for hd in 0..shape.heads {
                let col = hd * dh;
                for i in 0..n {
                    let dz = &gd[(start + i) * h + col..(start + i) * h + col + dh];
                    let p = &a.probs[base + i * n..base + (i + 1) * n];
                    // gradient w.r.t. the (dropped-out) weights and the values
                    for j in 0..n {
                        let drop = a.dropout.as_ref().map_or(F::one(), |d| d[base + i * n + j]);
                        let w = p[j] * drop;
                        let vj = &vv.row(start + j)[col..col + dh];
                        let r = shape.bucket(i, j);
                        let mut dw = F::zero();
                        for d in 0..dh {
                            dw += dz[d] * vj[d];
                            dv[(start + j) * h + col + d] += w * dz[d];
                        }
                        if let Some(rv) = rv {
                            for d in 0..dh {
                                dw += dz[d] * rv[r * dh + d];
                                drv[r * dh + d] += w * dz[d];
                            }
                        }
                        dprob[j] = dw * drop;
                    }
                    // softmax backward
                    let dot: F = (0..n).map(|j| p[j] * dprob[j]).fold(F::zero(), |x, y| x + y);
                    let qi = &qv.row(start + i)[col..col + dh];
                    for j in 0..n {
                        let de = p[j] * (dprob[j] - dot) * scale;
                        if de == F::zero() {
                            continue;
                        }
                        let kj = &kv.row(start + j)[col..col + dh];
                        let r = shape.bucket(i, j);
                        for d in 0..dh {
                            dq[(start + i) * h + col + d] += de * (kj[d] + rk[r * dh + d]);
                            dk[(start + j) * h + col + d] += de * qi[d];
                            drk[r * dh + d] += de * qi[d];
                        }
                    }
                }
                base += n * n;
            }
        }
        add_into(slot(grads, a.q, qv.shape()), &dq);
        add_into(slot(grads, a.k, kv.shape()), &dk);
        add_into(slot(grads, a.v, vv.shape()), &dv);
        add_into(slot(grads, a.rel_k, self.value(a.rel_k).shape()), &drk);
        if let Some(r) = a.rel_v {
            add_into(slot(grads, r, self.value(r).shape()), &drv);
        }
    }
}

fn slot<'g, F: Real>(grads: &'g mut [Option<Tensor<F>>], v: Var, shape: &[usize]) -> &'g mut [F] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
