//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the tape from the loss back to the leaves. Inputs that cannot reach a
//! parameter are skipped.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::kernels::{gemm, gemm_small, Layout};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Concat(Vec<Var>),
    SliceLast { a: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    OuterAdd(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SegmentSoftmax { a: Var, offsets: Vec<usize> },
    MulRows(Var, Var),
    IndexAdd { src: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over all leading dimensions: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let lb = if trans_b {
            Layout::Transposed
        } else {
            Layout::Normal
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm_small(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    Layout::Normal,
                    &bv[i * k * n..(i + 1) * k * n],
                    lb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, positional
    /// tables, attention masks).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || tb.is_empty() {
            return Err(mismatch("add_broadcast", sa, sb));
        }
        let bd = tb.data();
        let n = bd.len();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(mismatch("transpose", s, &[]));
        }
        let nd = s.len();
        let (m, n) = (s[nd - 2], s[nd - 1]);
        let batch = ta.len() / (m * n).max(1);
        let src = ta.data();
        let mut out = vec![0.0; ta.len()];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = src[o + i * n + j];
                }
            }
        }
        let mut shape = s.to_vec();
        shape.swap(nd - 2, nd - 1);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// `[b, l, h·d] → [b·h, l, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(mismatch("split_heads", s, &[heads]));
        }
        let (b, l, w) = (s[0], s[1], s[2]);
        let d = w / heads;
        let src = ta.data();
        let mut out = vec![0.0; ta.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let from = (bi * l + li) * w + h * d;
                    let to = ((bi * heads + h) * l + li) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let t = Tensor::new(vec![b * heads, l, d], out)?;
        Ok(self.push(t, Op::SplitHeads(a, heads), &[a]))
    }

    /// `[b·h, l, d] → [b, l, h·d]`, inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(mismatch("merge_heads", s, &[heads]));
        }
        let (bh, l, d) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let w = heads * d;
        let src = ta.data();
        let mut out = vec![0.0; ta.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let to = (bi * l + li) * w + h * d;
                    let from = ((bi * heads + h) * l + li) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let t = Tensor::new(vec![b, l, w], out)?;
        Ok(self.push(t, Op::MergeHeads(a, heads), &[a]))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::InvalidArgument("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let w = ta.last_dim();
        if start + len > w {
            return Err(mismatch("slice_last", ta.shape(), &[start, len]));
        }
        let rows = ta.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceLast { a, start }, &[a]))
    }

    /// Row gather: `out[i] = table[idx[i]]`, with `table` viewed as
    /// `[rows, last_dim]`. Gradients scatter-add back into the table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.last_dim());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(NnError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// `out[.., i, j] = a[.., i] + b[.., j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("outer_add", sa, sb));
        }
        let (n, m) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        shape.push(m);
        let batch = self.value(a).len() / n.max(1);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * n * m);
        for bi in 0..batch {
            for i in 0..n {
                let x = av[bi * n + i];
                out.extend(bv[bi * m..(bi + 1) * m].iter().map(|y| x + y));
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::OuterAdd(a, b), &[a, b]))
    }

    /// Softmax over the last dimension. `-inf` entries come out as exact zeros;
    /// a row with no finite entry is rejected.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit population variance, then
    /// applies `gain` and `bias` (both `[last_dim]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), &[a])
    }

    /// Smallest nonzero `|x|` over the inputs of every recorded ReLU-type
    /// node, or `inf` when there are none. Finite differences with a step
    /// near this value straddle a kink. Exact zeros are skipped: they come
    /// from rows that do not depend on any parameter.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|x| x.abs()))
            .filter(|x| *x > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { a, mask }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under the row-wise softmax of
    /// `logits`, skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.last_dim());
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let probs = softmax_rows(tl)?.into_data();
        let mut kept = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(NnError::IndexOutOfRange { index: t, rows: v });
            }
            // log-softmax computed from the logits to keep precision for tiny
            // probabilities
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return Err(NnError::AllTargetsIgnored);
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
            },
            &[logits],
        ))
    }

    /// Softmax within contiguous groups of a 1-d tensor; group `k` spans
    /// `offsets[k]..offsets[k + 1]`. Every group must be non-empty.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || offsets.first() != Some(&0) || offsets.last() != Some(&ta.len()) {
            return Err(mismatch("segment_softmax", ta.shape(), &[offsets.len()]));
        }
        let mut out = vec![0.0; ta.len()];
        for (k, w) in offsets.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(NnError::FullyMaskedRow { row: k });
            }
            let x = &ta.data()[w[0]..w[1]];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, v) in out[w[0]..w[1]].iter_mut().zip(x) {
                *o = (v - max).exp();
                total += *o;
            }
            out[w[0]..w[1]].iter_mut().for_each(|o| *o /= total);
        }
        let t = Tensor::new(vec![out.len()], out)?;
        Ok(self.push(
            t,
            Op::SegmentSoftmax {
                a,
                offsets: offsets.to_vec(),
            },
            &[a],
        ))
    }

    /// Row `r` of `x: [rows, d]` times `w[r]`, with `w: [rows]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 1 || tx.rows() != tw.len() {
            return Err(mismatch("mul_rows", tx.shape(), tw.shape()));
        }
        let d = tx.last_dim();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tw.data()[i / d.max(1)])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRows(x, w), &[x, w]))
    }

    /// Scatter-add: `out[idx[r]] += src[r]`, `out: [rows, d]`. Rows are
    /// added in order of `r`.
    pub fn index_add(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ts = self.value(src);
        if ts.rows() != idx.len() {
            return Err(mismatch("index_add", ts.shape(), &[idx.len()]));
        }
        let d = ts.last_dim();
        let mut out = vec![0.0; rows * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(NnError::IndexOutOfRange { index: i, rows });
            }
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(ts.row(r)) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::IndexAdd { src, idx: idx.to_vec() }, &[src]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(t, Op::Sum(a), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k.max(1);
                if let Some(ga) = acc(nodes, grads, *a) {
                    gemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Transposed, ga, true);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    gemm(k, m, n, ta.data(), Layout::Transposed, g, Layout::Normal, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = ta.shape();
                let nd = s.len();
                let (m, k) = (s[nd - 2], s[nd - 1]);
                let n = node.value.last_dim();
                let batch = ta.len() / (m * k).max(1);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        let lb = if *trans_b {
                            Layout::Normal
                        } else {
                            Layout::Transposed
                        };
                        gemm_small(m, n, k, gi, Layout::Normal, bi, lb, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_small(n, m, k, gi, Layout::Transposed, ai, Layout::Normal, out, true);
                        } else {
                            gemm_small(k, m, n, ai, Layout::Transposed, gi, Layout::Normal, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(tb) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(ta) {
                        *x += y * z;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    let n = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % n] += y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let nd = s.len();
                let (m, n) = (s[nd - 2], s[nd - 1]);
                if let Some(ga) = acc(nodes, grads, *a) {
                    let batch = ga.len() / (m * n).max(1);
                    for b in 0..batch {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[o + i * n + j] += g[o + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SplitHeads(a, heads) => {
                let s = self.shape(*a);
                let (b, l, w) = (s[0], s[1], s[2]);
                let d = w / heads;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let from = (bi * l + li) * w + h * d;
                                let to = ((bi * heads + h) * l + li) * d;
                                for c in 0..d {
                                    ga[from + c] += g[to + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(a, heads) => {
                let s = self.shape(*a);
                let (bh, l, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let w = heads * d;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let to = (bi * l + li) * w + h * d;
                                let from = ((bi * heads + h) * l + li) * d;
                                for c in 0..d {
                                    ga[from + c] += g[to + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = acc(nodes, grads, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast { a, start } => {
                let w = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let rows = node.value.rows();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * w + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let d = self.value(*table).last_dim();
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let n = self.value(*a).last_dim();
                let m = self.value(*b).last_dim();
                let batch = self.value(*a).len() / n.max(1);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for bi in 0..batch {
                        for i in 0..n {
                            let o = (bi * n + i) * m;
                            ga[bi * n + i] += g[o..o + m].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for bi in 0..batch {
                        for i in 0..n {
                            let o = (bi * n + i) * m;
                            for j in 0..m {
                                gb[bi * m + j] += g[o + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..d {
                            ga[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let df = d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        let inv = inv_std[r];
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            gx[r * d + c] += inv / df * (df * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a).data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta) {
                        *x += if *v > 0.0 { *y } else { slope * y };
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g[0] / count;
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for c in 0..v {
                            let onehot = if c == *t { 1.0 } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SegmentSoftmax { a, offsets } => {
                let y = node.value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(p, q)| p * q).sum();
                        for c in r {
                            ga[c] += y[c] * (g[c] - dot);
                        }
                    }
                }
            }
            Op::MulRows(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = tx.last_dim();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i] * tw.data()[i / d.max(1)];
                    }
                }
                if let Some(gw) = acc(nodes, grads, *w) {
                    for (r, v) in gw.iter_mut().enumerate() {
                        *v += tx.row(r).iter().zip(&g[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::IndexAdd { src, idx } => {
                let d = node.value.last_dim();
                if let Some(gs) = acc(nodes, grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gs[r * d + c] += g[i * d + c];
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradient of every parameter on this tape into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                let dst = store.get_mut(id).grad.data_mut();
                dst.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Row-wise softmax over the last dimension with `-inf` masking.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(NnError::FullyMaskedRow { row: r });
        }
        let start = out.len();
        let mut z = 0.0;
        for &x in row {
            let e = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
            z += e;
            out.push(e);
        }
        out[start..start + d].iter_mut().for_each(|e| *e /= z);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Gradients from one reverse pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter node; `None` for other nodes and for
    /// parameters that do not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
