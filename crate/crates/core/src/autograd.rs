//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the handles of its inputs. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order
//! because a node can only reference nodes created before it.
//!
//! Attention and the mixture negative log-likelihood are fused operations
//! with hand-written adjoints; the rest are elementwise or structural.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block: queries `q_start..q_start+q_len` attend over keys
/// `k_start..k_start+k_len`. Queries outside every group produce zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnGroup {
    /// Self-attention over a contiguous block of rows.
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Debug)]
pub struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    pub groups: Vec<AttnGroup>,
    pub heads: usize,
    /// Additive logit bias per group, `q_len * k_len` entries each.
    pub bias: Option<Vec<f64>>,
    /// Softmax weights per group, laid out `[head][query][key]`.
    pub probs: Vec<f64>,
}

impl AttentionRecord {
    fn offsets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut p_off = Vec::with_capacity(self.groups.len());
        let mut b_off = Vec::with_capacity(self.groups.len());
        let (mut p, mut b) = (0, 0);
        for g in &self.groups {
            p_off.push(p);
            b_off.push(b);
            p += self.heads * g.q_len * g.k_len;
            b += g.q_len * g.k_len;
        }
        (p_off, b_off)
    }

    /// Attention weights of `head` for group `group` as a row-major
    /// `q_len x k_len` slice.
    pub fn weights(&self, group: usize, head: usize) -> &[f64] {
        let (p_off, _) = self.offsets();
        let g = self.groups[group];
        let n = g.q_len * g.k_len;
        let start = p_off[group] + head * n;
        &self.probs[start..start + n]
    }
}

/// Constant side inputs of the fused mixture loss.
#[derive(Clone, Debug)]
pub struct MixtureTargets {
    /// `n x 4`: target (X, Y, vX, vY) per row.
    pub targets: Tensor,
    /// `n x I`: log of the winner-take-all weight of each mode.
    pub log_wta: Tensor,
    /// Per-row multiplier of the row loss; zero masks a row out.
    pub row_weights: Vec<f64>,
}

#[derive(Debug)]
struct MixtureRecord {
    mu_p: Var,
    var_p: Var,
    mu_v: Var,
    var_v: Var,
    logits: Var,
    inputs: MixtureTargets,
    /// Posterior responsibility of every mode per row.
    resp: Tensor,
    /// Softmax of the logits per row.
    mix: Tensor,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ShiftSeq {
        x: Var,
        seq_len: usize,
        offset: isize,
    },
    SoftmaxPool {
        scores: Var,
        feats: Var,
        group_len: usize,
        alpha: Vec<f64>,
    },
    Attention(Box<AttentionRecord>),
    MixtureNll(Box<MixtureRecord>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no parameter gradient, but its gradient is still
    /// reported by [`Backprop::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Bind a parameter. Repeated calls return the same node so gradients
    /// from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1 x cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(row);
        assert_eq!(bv.rows(), 1, "add_row expects a single-row bias");
        assert_eq!(av.cols(), bv.cols(), "add_row column mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_inplace(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column permutation / selection: output column `j` is input column
    /// `idx[j]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (o, &c) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[c];
            }
        }
        self.push(out, Op::GatherCols(a, idx.to_vec()))
    }

    /// Shift rows inside consecutive sequences of `seq_len` rows by
    /// `offset` positions, filling with zeros at the sequence ends. Used to
    /// express 1-D convolution taps.
    pub fn shift_seq(&mut self, x: Var, seq_len: usize, offset: isize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows() % seq_len, 0, "rows not a multiple of seq_len");
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for s in 0..xv.rows() / seq_len {
            for pos in 0..seq_len {
                let src = pos as isize - offset;
                if (0..seq_len as isize).contains(&src) {
                    out.row_mut(s * seq_len + pos)
                        .copy_from_slice(xv.row(s * seq_len + src as usize));
                }
            }
        }
        self.push(
            out,
            Op::ShiftSeq {
                x,
                seq_len,
                offset,
            },
        )
    }

    /// Softmax-weighted average of `feats` within consecutive groups of
    /// `group_len` rows, weights from the single-column `scores`.
    pub fn softmax_pool(&mut self, scores: Var, feats: Var, group_len: usize) -> Var {
        let sv = self.value(scores);
        let fv = self.value(feats);
        assert_eq!(sv.cols(), 1, "pool scores must be a column");
        assert_eq!(sv.rows(), fv.rows(), "pool score/feature row mismatch");
        assert_eq!(fv.rows() % group_len, 0, "rows not a multiple of group_len");
        let groups = fv.rows() / group_len;
        let mut alpha = sv.data().to_vec();
        let mut out = Tensor::zeros(groups, fv.cols());
        for g in 0..groups {
            let a = &mut alpha[g * group_len..(g + 1) * group_len];
            softmax_inplace(a);
            for (p, &w) in a.iter().enumerate() {
                for (o, f) in out.row_mut(g).iter_mut().zip(fv.row(g * group_len + p)) {
                    *o += w * f;
                }
            }
        }
        self.push(
            out,
            Op::SoftmaxPool {
                scores,
                feats,
                group_len,
                alpha,
            },
        )
    }

    /// Grouped multi-head scaled dot-product attention,
    /// `softmax(q k^T / sqrt(d_k) + bias) v` per head and group.
    ///
    /// `q` and `k` share the column count, which must be divisible by
    /// `heads`; so must the column count of `v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<AttnGroup>,
        heads: usize,
        bias: Option<Vec<f64>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "query/key width mismatch");
        assert_eq!(kv.rows(), vv.rows(), "key/value row mismatch");
        assert!(heads > 0 && qv.cols() % heads == 0, "heads must divide width");
        assert_eq!(vv.cols() % heads, 0, "heads must divide value width");
        let dk = qv.cols() / heads;
        let dvh = vv.cols() / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::new();
        let mut b_off = 0;
        for g in &groups {
            assert!(g.q_start + g.q_len <= qv.rows() && g.k_start + g.k_len <= kv.rows());
            for h in 0..heads {
                for qi in 0..g.q_len {
                    let qrow = &qv.row(g.q_start + qi)[h * dk..(h + 1) * dk];
                    let base = probs.len();
                    for kj in 0..g.k_len {
                        let krow = &kv.row(g.k_start + kj)[h * dk..(h + 1) * dk];
                        let mut s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        s *= inv;
                        if let Some(b) = &bias {
                            s += b[b_off + qi * g.k_len + kj];
                        }
                        probs.push(s);
                    }
                    softmax_inplace(&mut probs[base..]);
                    let orow = &mut out.row_mut(g.q_start + qi)[h * dvh..(h + 1) * dvh];
                    for kj in 0..g.k_len {
                        let p = probs[base + kj];
                        let vrow = &vv.row(g.k_start + kj)[h * dvh..(h + 1) * dvh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
            b_off += g.q_len * g.k_len;
        }
        if let Some(b) = &bias {
            assert_eq!(b.len(), b_off, "attention bias length mismatch");
        }
        let rec = AttentionRecord {
            q,
            k,
            v,
            groups,
            heads,
            bias,
            probs,
        };
        self.push(out, Op::Attention(Box::new(rec)))
    }

    /// Attention record of a node produced by [`Tape::attention`].
    pub fn attention_record(&self, v: Var) -> Option<&AttentionRecord> {
        match &self.nodes[v.0].op {
            Op::Attention(r) => Some(r),
            _ => None,
        }
    }

    /// Fused Gaussian-mixture loss summed over rows:
    /// `sum_r rho_r * -ln sum_i exp(ln w_ri + ln a_ri - NLL_ri)` with
    /// `w = softmax(logits)` and the per-mode NLL over (X, Y, vX, vY) with
    /// diagonal covariance. Mode `i` owns columns `2i, 2i+1` of the
    /// mean/variance inputs.
    pub fn mixture_nll(
        &mut self,
        mu_p: Var,
        var_p: Var,
        mu_v: Var,
        var_v: Var,
        logits: Var,
        inputs: MixtureTargets,
    ) -> Var {
        let (n, modes) = self.shape(logits);
        for x in [mu_p, var_p, mu_v, var_v] {
            assert_eq!(self.shape(x), (n, 2 * modes), "mixture input shape");
        }
        assert_eq!(inputs.targets.shape(), (n, 4));
        assert_eq!(inputs.log_wta.shape(), (n, modes));
        assert_eq!(inputs.row_weights.len(), n);
        let mut resp = Tensor::zeros(n, modes);
        let mut mix = Tensor::zeros(n, modes);
        let mut total = 0.0;
        let mut nll = vec![0.0; modes];
        for r in 0..n {
            let m = mix.row_mut(r);
            m.copy_from_slice(self.value(logits).row(r));
            softmax_inplace(m);
            let rho = inputs.row_weights[r];
            if rho == 0.0 {
                continue;
            }
            let z = inputs.targets.row(r);
            let lw = log_softmax(self.value(logits).row(r));
            for (i, nl) in nll.iter_mut().enumerate() {
                let mu = [
                    self.value(mu_p).get(r, 2 * i),
                    self.value(mu_p).get(r, 2 * i + 1),
                    self.value(mu_v).get(r, 2 * i),
                    self.value(mu_v).get(r, 2 * i + 1),
                ];
                let var = [
                    self.value(var_p).get(r, 2 * i),
                    self.value(var_p).get(r, 2 * i + 1),
                    self.value(var_v).get(r, 2 * i),
                    self.value(var_v).get(r, 2 * i + 1),
                ];
                *nl = crate::loss::mode_nll_unchecked(z, &mu, &var);
            }
            let logits_r: Vec<f64> = (0..modes)
                .map(|i| lw[i] + inputs.log_wta.get(r, i) - nll[i])
                .collect();
            let lse = log_sum_exp(&logits_r);
            total += rho * -lse;
            for (i, l) in logits_r.iter().enumerate() {
                resp.set(r, i, (l - lse).exp());
            }
        }
        let rec = MixtureRecord {
            mu_p,
            var_p,
            mu_v,
            var_v,
            logits,
            inputs,
            resp,
            mix,
        };
        self.push(
            Tensor::from_vec(1, 1, vec![total]),
            Op::MixtureNll(Box::new(rec)),
        )
    }

    /// Reverse pass from the scalar `root` (its seed gradient is 1).
    pub fn backward(&self, root: Var) -> Backprop<'_> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut ga, 0.0);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Offset(a) => {
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * sigmoid(y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gy), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.get(0, 0)));
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        c0 += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Tensor::from_vec(
                            rows,
                            cols,
                            g.data()[r0 * cols..(r0 + rows) * cols].to_vec(),
                        );
                        r0 += rows;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let dst = ga.row_mut(r);
                        for (j, &c) in idx.iter().enumerate() {
                            dst[c] += gr[j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ShiftSeq { x, seq_len, offset } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, cols);
                    for s in 0..rows / seq_len {
                        for pos in 0..*seq_len {
                            let src = pos as isize - offset;
                            if (0..*seq_len as isize).contains(&src) {
                                let dst = s * seq_len + src as usize;
                                let row = g.row(s * seq_len + pos).to_vec();
                                for (o, v) in gx.row_mut(dst).iter_mut().zip(row) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxPool {
                    scores,
                    feats,
                    group_len,
                    alpha,
                } => {
                    let fv = self.value(*feats);
                    let mut gf = Tensor::zeros(fv.rows(), fv.cols());
                    let mut gs = Tensor::zeros(fv.rows(), 1);
                    for grp in 0..g.rows() {
                        let gout = g.row(grp);
                        let base = grp * group_len;
                        let mut dalpha = vec![0.0; *group_len];
                        for p in 0..*group_len {
                            let a = alpha[base + p];
                            for (o, x) in gf.row_mut(base + p).iter_mut().zip(gout) {
                                *o = a * x;
                            }
                            dalpha[p] = gout.iter().zip(fv.row(base + p)).map(|(x, y)| x * y).sum();
                        }
                        let dot: f64 = (0..*group_len).map(|p| alpha[base + p] * dalpha[p]).sum();
                        for p in 0..*group_len {
                            gs.set(base + p, 0, alpha[base + p] * (dalpha[p] - dot));
                        }
                    }
                    accumulate(&mut grads, *scores, gs);
                    accumulate(&mut grads, *feats, gf);
                }
                Op::Attention(rec) => {
                    let (gq, gk, gv) = self.attention_backward(rec, &g);
                    accumulate(&mut grads, rec.q, gq);
                    accumulate(&mut grads, rec.k, gk);
                    accumulate(&mut grads, rec.v, gv);
                }
                Op::MixtureNll(rec) => {
                    self.mixture_backward(rec, g.get(0, 0), &mut grads);
                }
            }
        }
        Backprop { grads, tape: self }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let heads = rec.heads;
        let dk = qv.cols() / heads;
        let dvh = vv.cols() / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), qv.cols());
        let mut gk = Tensor::zeros(kv.rows(), kv.cols());
        let mut gv = Tensor::zeros(vv.rows(), vv.cols());
        let (p_off, _) = rec.offsets();
        for (gi, grp) in rec.groups.iter().enumerate() {
            for h in 0..heads {
                let pbase = p_off[gi] + h * grp.q_len * grp.k_len;
                for qi in 0..grp.q_len {
                    let p = &rec.probs[pbase + qi * grp.k_len..pbase + (qi + 1) * grp.k_len];
                    let grow = &g.row(grp.q_start + qi)[h * dvh..(h + 1) * dvh];
                    let mut dp = vec![0.0; grp.k_len];
                    for kj in 0..grp.k_len {
                        let vrow = &vv.row(grp.k_start + kj)[h * dvh..(h + 1) * dvh];
                        dp[kj] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let gvrow = &mut gv.row_mut(grp.k_start + kj)[h * dvh..(h + 1) * dvh];
                        for (o, x) in gvrow.iter_mut().zip(grow) {
                            *o += p[kj] * x;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for kj in 0..grp.k_len {
                        let ds = p[kj] * (dp[kj] - dot) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        let qr = grp.q_start + qi;
                        let kr = grp.k_start + kj;
                        for c in h * dk..(h + 1) * dk {
                            let qc = qv.get(qr, c);
                            let kc = kv.get(kr, c);
                            gq.data_mut()[qr * qv.cols() + c] += ds * kc;
                            gk.data_mut()[kr * kv.cols() + c] += ds * qc;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }

    fn mixture_backward(&self, rec: &MixtureRecord, g: f64, grads: &mut [Option<Tensor>]) {
        let (n, modes) = self.shape(rec.logits);
        let mut g_mu_p = Tensor::zeros(n, 2 * modes);
        let mut g_var_p = Tensor::zeros(n, 2 * modes);
        let mut g_mu_v = Tensor::zeros(n, 2 * modes);
        let mut g_var_v = Tensor::zeros(n, 2 * modes);
        let mut g_logits = Tensor::zeros(n, modes);
        let (mu_p, var_p) = (self.value(rec.mu_p), self.value(rec.var_p));
        let (mu_v, var_v) = (self.value(rec.mu_v), self.value(rec.var_v));
        for r in 0..n {
            let rho = rec.inputs.row_weights[r];
            if rho == 0.0 {
                continue;
            }
            let c = g * rho;
            let z = rec.inputs.targets.row(r);
            for i in 0..modes {
                let ri = rec.resp.get(r, i);
                g_logits.set(r, i, c * (rec.mix.get(r, i) - ri));
                let w = c * ri;
                for d in 0..2 {
                    let col = 2 * i + d;
                    let (m, v) = (mu_p.get(r, col), var_p.get(r, col));
                    let e = z[d] - m;
                    g_mu_p.set(r, col, -w * e / v);
                    g_var_p.set(r, col, w * (0.5 / v - 0.5 * e * e / (v * v)));
                    let (m, v) = (mu_v.get(r, col), var_v.get(r, col));
                    let e = z[2 + d] - m;
                    g_mu_v.set(r, col, -w * e / v);
                    g_var_v.set(r, col, w * (0.5 / v - 0.5 * e * e / (v * v)));
                }
            }
        }
        accumulate(grads, rec.mu_p, g_mu_p);
        accumulate(grads, rec.var_p, g_var_p);
        accumulate(grads, rec.mu_v, g_mu_v);
        accumulate(grads, rec.var_v, g_var_v);
        accumulate(grads, rec.logits, g_logits);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_inplace(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| v - lse).collect()
}

/// Result of [`Tape::backward`].
pub struct Backprop<'t> {
    grads: Vec<Option<Tensor>>,
    tape: &'t Tape,
}

impl Backprop<'_> {
    /// Gradient of the root with respect to an input or parameter leaf.
    /// Intermediate nodes are released during the sweep and return `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for (id, v) in &self.tape.params {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(*id, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` w.r.t. every entry of `inputs`,
    /// compared to the tape gradient.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let bp = tape.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.input(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).get(0, 0)
        };
        for (i, inp) in inputs.iter().enumerate() {
            let analytic = bp.grad(vars[i]).cloned().unwrap_or(Tensor::zeros(inp.rows(), inp.cols()));
            for k in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[k] += 1e-5;
                let mut minus = inputs.clone();
                minus[i].data_mut()[k] -= 1e-5;
                let fd = (eval(&plus) - eval(&minus)) / 2e-5;
                let an = analytic.data()[k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-5, "input {i} entry {k}: fd {fd} analytic {an}");
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * (seed * 7919 + 13)) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        check(vec![t(3, 4, 1), t(4, 2, 2), t(1, 2, 3)], |tp, v| {
            let m = tp.matmul(v[0], v[1]);
            let a = tp.add_row(m, v[2]);
            let s = tp.sigmoid(a);
            let th = tp.tanh(a);
            let p = tp.mul(s, th);
            let sp = tp.softplus(p);
            let r = tp.relu(a);
            let q = tp.sub(sp, r);
            let sc = tp.scale(q, 1.7);
            tp.sum_all(sc)
        });
    }

    #[test]
    fn structural_grads() {
        check(vec![t(4, 3, 4), t(4, 2, 5)], |tp, v| {
            let c = tp.concat_cols(&[v[0], v[1]]);
            let s = tp.slice_cols(c, 1, 3);
            let r = tp.slice_rows(s, 1, 2);
            let g = tp.gather_rows(s, &[3, 0, 0]);
            let g = tp.gather_cols(g, &[2, 0, 1]);
            let g = tp.offset(g, 0.3);
            let cr = tp.concat_rows(&[r, g]);
            let sh = tp.shift_seq(cr, 5, 1);
            let sm = tp.softmax_rows(sh);
            let w = tp.input(t(5, 3, 9));
            let m = tp.mul(sm, w);
            tp.sum_all(m)
        });
    }

    #[test]
    fn pool_grads() {
        check(vec![t(6, 1, 6), t(6, 3, 7)], |tp, v| {
            let p = tp.softmax_pool(v[0], v[1], 3);
            let w = tp.input(t(2, 3, 8));
            let m = tp.mul(p, w);
            tp.sum_all(m)
        });
    }

    #[test]
    fn attention_grads_with_bias_and_groups() {
        check(vec![t(5, 4, 10), t(6, 4, 11), t(6, 4, 12)], |tp, v| {
            let groups = vec![
                AttnGroup { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
                AttnGroup { q_start: 2, q_len: 3, k_start: 3, k_len: 3 },
            ];
            let bias = Some((0..15).map(|i| -(i as f64) * 0.1).collect());
            let o = tp.attention(v[0], v[1], v[2], groups, 2, bias);
            let w = tp.input(t(5, 4, 13));
            let m = tp.mul(o, w);
            tp.sum_all(m)
        });
    }

    #[test]
    fn mixture_grads() {
        let targets = t(3, 4, 20);
        let log_wta = t(3, 2, 21);
        let var = t(3, 4, 22).map(|x| x.abs() + 0.3);
        let var2 = t(3, 4, 23).map(|x| x.abs() + 0.5);
        check(vec![t(3, 4, 24), var, t(3, 4, 25), var2, t(3, 2, 26)], move |tp, v| {
            tp.mixture_nll(
                v[0],
                v[1],
                v[2],
                v[3],
                v[4],
                MixtureTargets {
                    targets: targets.clone(),
                    log_wta: log_wta.clone(),
                    row_weights: vec![1.0, 0.0, 0.5],
                },
            )
        });
    }

    #[test]
    fn param_reuse_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 1, vec![2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let m = tape.mul(a, b);
        let s = tape.sum_all(m);
        let g = tape.backward(s).param_grads();
        assert_eq!(g.get(id).unwrap().data(), &[4.0]);
    }
}
