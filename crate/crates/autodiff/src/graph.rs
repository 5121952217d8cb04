//! Computation graph with recorded forward values and reverse-mode backward.
//!
//! Nodes are appended in creation order, so the node vector is already a
//! topological order: every parent index is smaller than its child's.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Vector-Jacobian product of a custom op:
/// `(grad_out, parent values, output value) -> one gradient per parent`.
pub type VjpFn<F> = Arc<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Tensor<F>> + Send + Sync>;

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: F },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    PadRows(Var),
    Reshape(Var),
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        contexts: Vec<Option<Segment>>,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Sum(Var),
    Custom { parents: Vec<Var>, vjp: VjpFn<F> },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// A single forward pass. Rebuilt for every batch; never reused across steps.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Gradients are tracked only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[m x k] · b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] · b[n x k]ᵀ`, the layout used for `[out x in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if self.value(a).rank() > 2 || self.value(b).rank() > 2 || k != kb {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            b_strides,
            F::zero(),
            out.data_mut(),
            (n, 1),
        );
        Ok(self.push(Op::MatMul { a, b, transpose_b }, out, &[a, b]))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Adds a `[c]` bias to every row of an `[r x c]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).numel() != c {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias { x, bias }, out, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = F::from_f64_lossy(factor);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        self.push(Op::Scale { x, factor }, out, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = F::from_f64_lossy(GELU_C);
        let a = F::from_f64_lossy(GELU_A);
        let half = F::from_f64_lossy(0.5);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            let v = *o;
            let t = (c * (v + a * v * v * v)).tanh();
            *o = half * v * (F::one() + t);
        }
        self.push(Op::Gelu(x), out, &[x])
    }

    // ── structural ──────────────────────────────────────────────────

    /// Stacks matrices with equal column count along the row (time) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_rows of nothing".into()))?;
        let (_, c) = self.dims(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows { x, start }, out, &[x]))
    }

    /// Stacks matrices with equal row count side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_cols of nothing".into()))?;
        let (r, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { x, start }, out, &[x]))
    }

    /// Appends `extra` zero rows.
    pub fn pad_rows(&mut self, x: Var, extra: usize) -> Var {
        if extra == 0 {
            return x;
        }
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        data.resize((r + extra) * c, F::zero());
        let out = Tensor::new(vec![r + extra, c], data).expect("padded shape is consistent");
        self.push(Op::PadRows(x), out, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
            });
        }
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(Op::Transpose(x), out, &[x]))
    }

    /// Row lookup into an embedding table `[vocab x dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.dims(table);
        if ids.is_empty() {
            return Err(TensorError::Config("gather_rows with no ids".into()));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(src.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ── normalization and attention ─────────────────────────────────

    /// Per-row normalization to zero mean and unit variance, then `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, h) = self.dims(x);
        if h < 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: self.shape(x).to_vec(),
            });
        }
        if self.value(gain).numel() != h || self.value(bias).numel() != h {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(eps);
        let inv_h = F::one() / F::from_f64_lossy(h as f64);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let mut xhat = vec![F::zero(); r * h];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * h];
        for i in 0..r {
            let row = &src[i * h..(i + 1) * h];
            let mu = row.iter().copied().sum::<F>() * inv_h;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_h;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..h {
                let n = (row[j] - mu) * rs;
                xhat[i * h + j] = n;
                out[i * h + j] = n * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
            &[x, gain, bias],
        ))
    }

    /// Row softmax; with `causal`, entry `(i, j)` for `j > i` is masked to zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let live = if causal { (i + 1).min(c) } else { c };
            softmax_in_place(&mut row[..live]);
            for v in &mut row[live..] {
                *v = F::zero();
            }
        }
        debug_assert_eq!(out.rows(), r);
        self.push(Op::Softmax(x), out, &[x])
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[N x h]` with `h` divisible by `heads`. Rows attend
    /// only within their own segment; with `causal`, row `i` of a segment sees
    /// rows `0..=i` of that segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let contexts = vec![None; segments.len()];
        self.attention_with_context(q, k, v, segments, &contexts, heads, causal)
    }

    /// [`Graph::attention`] where segment `s` may additionally attend to every
    /// row of `contexts[s]`, placed before its own rows. Several segments can
    /// share one context, e.g. a common prompt computed once.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_with_context(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        contexts: &[Option<Segment>],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (n, h) = self.dims(q);
        if self.dims(k) != (n, h) || self.dims(v) != (n, h) {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || h % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention: width {h} not divisible by {heads} heads"
            )));
        }
        check_segments(segments, n)?;
        if contexts.len() != segments.len() {
            return Err(TensorError::Config(format!(
                "attention: {} contexts for {} segments",
                contexts.len(),
                segments.len()
            )));
        }
        for c in contexts.iter().flatten() {
            if c.len == 0 || c.end() > n {
                return Err(TensorError::Config(format!("attention: bad context {c:?}")));
            }
        }
        let d = h / heads;
        let scale = F::from_f64_lossy(1.0 / (d as f64).sqrt());
        let total: usize = segments
            .iter()
            .zip(contexts)
            .map(|(s, c)| s.len * (s.len + c.map_or(0, |c| c.len)) * heads)
            .sum();
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); n * h];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut off = 0;
        for (seg, ctx) in segments.iter().zip(contexts) {
            let l = seg.len;
            let lc = ctx.map_or(0, |c| c.len);
            let w = lc + l;
            for head in 0..heads {
                let base = seg.start * h + head * d;
                let p = &mut probs[off..off + l * w];
                // scores = scale * Q_h · [K_ctx; K_own]ᵀ
                if let Some(c) = ctx {
                    let cb = c.start * h + head * d;
                    F::gemm(l, d, lc, scale, &qd[base..], (h, 1), &kd[cb..], (1, h), F::zero(), p, (w, 1));
                }
                F::gemm(l, d, l, scale, &qd[base..], (h, 1), &kd[base..], (1, h), F::zero(), &mut p[lc..], (w, 1));
                for (i, row) in p.chunks_mut(w).enumerate() {
                    let live = if causal { lc + i + 1 } else { w };
                    softmax_in_place(&mut row[..live]);
                    for x in &mut row[live..] {
                        *x = F::zero();
                    }
                }
                if let Some(c) = ctx {
                    let cb = c.start * h + head * d;
                    F::gemm(l, lc, d, F::one(), p, (w, 1), &vd[cb..], (h, 1), F::zero(), &mut out[base..], (h, 1));
                }
                let beta = if lc > 0 { F::one() } else { F::zero() };
                F::gemm(l, l, d, F::one(), &p[lc..], (w, 1), &vd[base..], (h, 1), beta, &mut out[base..], (h, 1));
                off += l * w;
            }
        }
        let out = Tensor::new(vec![n, h], out)?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                contexts: contexts.to_vec(),
                heads,
                probs,
            },
            out,
            &[q, k, v],
        ))
    }

    /// Weighted negative log-likelihood `Σ w_i · (−log softmax(logits_i)[t_i])`.
    ///
    /// Rows with zero weight are skipped entirely, so their logits never
    /// influence the value or the gradient.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (r, vocab) = self.dims(logits);
        if targets.len() != r || weights.len() != r {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(TensorError::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); r * vocab];
        let mut loss = F::zero();
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            p.copy_from_slice(row);
            let lse = softmax_in_place(p);
            loss += F::from_f64_lossy(weights[i]) * (lse - row[t]);
        }
        let weights = weights.iter().map(|&w| F::from_f64_lossy(w)).collect();
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Mean negative log-likelihood over the masked-in rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// One-dimensional convolution with filter size = stride = `k`.
    ///
    /// `weights` is `[k x c_in x c_out]`. The input is right-zero-padded to a
    /// multiple of `k`, giving `ceil(n / k)` output rows.
    pub fn conv1d(&mut self, x: Var, weights: Var, bias: Var, k: usize) -> Result<Var> {
        let n = self.dims(x).0;
        let (out, _) = self.conv1d_packed(x, &[Segment::new(0, n)], weights, bias, k)?;
        Ok(out)
    }

    /// [`Graph::conv1d`] applied independently to every segment of a packed
    /// input. Returns the packed output and its segments.
    pub fn conv1d_packed(
        &mut self,
        x: Var,
        segments: &[Segment],
        weights: Var,
        bias: Var,
        k: usize,
    ) -> Result<(Var, Vec<Segment>)> {
        if k == 0 {
            return Err(TensorError::Config("conv1d kernel size must be >= 1".into()));
        }
        let (n, c_in) = self.dims(x);
        check_segments(segments, n)?;
        let wshape = self.shape(weights).to_vec();
        if wshape.len() != 3 || wshape[0] != k || wshape[1] != c_in {
            return Err(mismatch("conv1d", self.shape(x), &wshape));
        }
        let c_out = wshape[2];
        let mut windows = Vec::with_capacity(segments.len());
        let mut out_segments = Vec::with_capacity(segments.len());
        let mut cursor = 0;
        for seg in segments {
            let m = seg.len.div_ceil(k);
            let part = if segments.len() == 1 {
                x
            } else {
                self.slice_rows(x, seg.start, seg.len)?
            };
            let padded = self.pad_rows(part, m * k - seg.len);
            windows.push(self.reshape(padded, &[m, k * c_in])?);
            out_segments.push(Segment::new(cursor, m));
            cursor += m;
        }
        let stacked = if windows.len() == 1 {
            windows[0]
        } else {
            self.concat_rows(&windows)?
        };
        let w2 = self.reshape(weights, &[k * c_in, c_out])?;
        let y = self.matmul(stacked, w2)?;
        Ok((self.add_bias(y, bias)?, out_segments))
    }

    /// Op with a caller-supplied backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Tensor<F>, vjp: VjpFn<F>) -> Var {
        self.push(
            Op::Custom {
                parents: parents.to_vec(),
                vjp,
            },
            value,
            parents,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Returns fresh, zero-initialized
    /// accumulators filled for every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.backprop_node(i, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, lo: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = lo[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = node.value.cols();
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if *transpose_b {
                    // C = A·Bᵀ, B is [n x k]
                    acc(*a, &mut |da| {
                        F::gemm(m, n, k, F::one(), gd, (n, 1), bd, (k, 1), F::one(), da, (k, 1))
                    });
                    acc(*b, &mut |db| {
                        F::gemm(n, m, k, F::one(), gd, (1, n), ad, (k, 1), F::one(), db, (k, 1))
                    });
                } else {
                    acc(*a, &mut |da| {
                        F::gemm(m, n, k, F::one(), gd, (n, 1), bd, (1, n), F::one(), da, (k, 1))
                    });
                    acc(*b, &mut |db| {
                        F::gemm(k, m, n, F::one(), ad, (1, k), gd, (n, 1), F::one(), db, (n, 1))
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, gd));
                acc(*b, &mut |db| add_into(db, gd));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |dx| add_into(dx, gd));
                let c = node.value.cols();
                acc(*bias, &mut |db| {
                    for row in gd.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |dx| {
                    for (d, &gg) in dx.iter_mut().zip(gd) {
                        *d += gg * *factor;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                let c = F::from_f64_lossy(GELU_C);
                let a = F::from_f64_lossy(GELU_A);
                let three_a = F::from_f64_lossy(3.0 * GELU_A);
                let half = F::from_f64_lossy(0.5);
                acc(*x, &mut |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + three_a * v * v);
                        *d += gg * (half * (F::one() + t) + half * v * dt);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |dp| add_into(dp, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let s = start * c;
                acc(*x, &mut |dx| add_into(&mut dx[s..s + gd.len()], gd));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    acc(*p, &mut |dp| {
                        for (r, row) in dp.chunks_mut(pc).enumerate() {
                            add_into(row, &gd[r * total + off..r * total + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |dx| {
                    for (r, row) in dx.chunks_mut(c).enumerate() {
                        add_into(&mut row[*start..start + len], &gd[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::PadRows(x) => {
                let len = nodes[x.0].value.numel();
                acc(*x, &mut |dx| add_into(dx, &gd[..len]));
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, gd)),
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * c..(id + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => {
                let gg = gd[0];
                acc(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += gg;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = node.value.cols();
                let gv = nodes[gain.0].value.data();
                let inv_h = F::one() / F::from_f64_lossy(h as f64);
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![F::zero(); h];
                    for (r, rs) in rstd.iter().enumerate() {
                        let o = r * h;
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..h {
                            dxhat[j] = gd[o + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[o + j];
                        }
                        m1 *= inv_h;
                        m2 *= inv_h;
                        for j in 0..h {
                            dx[o + j] += *rs * (dxhat[j] - m1 - xhat[o + j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (row_g, row_x) in gd.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += row_g[j] * row_x[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for row in gd.chunks(h) {
                        add_into(db, row);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let p = node.value.data();
                acc(*x, &mut |dx| {
                    for ((drow, grow), prow) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(p.chunks(c)) {
                        softmax_vjp_accumulate(drow, grow, prow);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                contexts,
                heads,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                segments,
                contexts,
                *heads,
                probs,
                gd,
                lo,
            ),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = node_cols(nodes, *logits);
                let gg = gd[0];
                acc(*logits, &mut |dl| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let s = gg * w;
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for (d, &pv) in row.iter_mut().zip(p) {
                            *d += s * pv;
                        }
                        row[targets[r]] -= s;
                    }
                });
            }
            Op::Custom { parents, vjp } => {
                let values: Vec<&Tensor<F>> = parents.iter().map(|p| &nodes[p.0].value).collect();
                let pg = vjp(g, &values, &node.value);
                for (p, t) in parents.iter().zip(pg) {
                    acc(*p, &mut |dp| add_into(dp, t.data()));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        segments: &[Segment],
        contexts: &[Option<Segment>],
        heads: usize,
        probs: &[F],
        gd: &[F],
        lo: &mut [Option<Tensor<F>>],
    ) {
        let nodes = &self.nodes;
        let (n, h) = (nodes[q.0].value.rows(), nodes[q.0].value.cols());
        let d = h / heads;
        let scale = F::from_f64_lossy(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let want = |x: Var| nodes[x.0].requires_grad;
        let mut dq = vec![F::zero(); if want(q) { n * h } else { 0 }];
        let mut dk = vec![F::zero(); if want(k) { n * h } else { 0 }];
        let mut dv = vec![F::zero(); if want(v) { n * h } else { 0 }];
        let max_area = segments
            .iter()
            .zip(contexts)
            .map(|(s, c)| s.len * (s.len + c.map_or(0, |c| c.len)))
            .max()
            .unwrap_or(0);
        let mut ds = vec![F::zero(); max_area];
        let mut off = 0;
        for (seg, ctx) in segments.iter().zip(contexts) {
            let l = seg.len;
            let lc = ctx.map_or(0, |c| c.len);
            let w = lc + l;
            for head in 0..heads {
                let base = seg.start * h + head * d;
                let cb = ctx.map_or(0, |c| c.start * h + head * d);
                let p = &probs[off..off + l * w];
                off += l * w;
                if want(v) {
                    // dV_h += Pᵀ · dO_h, split over context and own rows
                    if lc > 0 {
                        F::gemm(lc, l, d, F::one(), p, (1, w), &gd[base..], (h, 1), F::one(), &mut dv[cb..], (h, 1));
                    }
                    F::gemm(l, l, d, F::one(), &p[lc..], (1, w), &gd[base..], (h, 1), F::one(), &mut dv[base..], (h, 1));
                }
                if !want(q) && !want(k) {
                    continue;
                }
                let ds = &mut ds[..l * w];
                // dP = dO_h · [V_ctx; V_own]ᵀ
                if lc > 0 {
                    F::gemm(l, d, lc, F::one(), &gd[base..], (h, 1), &vd[cb..], (1, h), F::zero(), ds, (w, 1));
                }
                F::gemm(l, d, l, F::one(), &gd[base..], (h, 1), &vd[base..], (1, h), F::zero(), &mut ds[lc..], (w, 1));
                for (drow, prow) in ds.chunks_mut(w).zip(p.chunks(w)) {
                    let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in drow.iter_mut().zip(prow) {
                        *x = pv * (*x - dot);
                    }
                }
                if want(q) {
                    if lc > 0 {
                        F::gemm(l, lc, d, scale, ds, (w, 1), &kd[cb..], (h, 1), F::one(), &mut dq[base..], (h, 1));
                    }
                    F::gemm(l, l, d, scale, &ds[lc..], (w, 1), &kd[base..], (h, 1), F::one(), &mut dq[base..], (h, 1));
                }
                if want(k) {
                    if lc > 0 {
                        F::gemm(lc, l, d, scale, ds, (1, w), &qd[base..], (h, 1), F::one(), &mut dk[cb..], (h, 1));
                    }
                    F::gemm(l, l, d, scale, &ds[lc..], (1, w), &qd[base..], (h, 1), F::one(), &mut dk[base..], (h, 1));
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !want(var) {
                continue;
            }
            let slot = lo[var.0].get_or_insert_with(|| Tensor::zeros(&[n, h]));
            add_into(slot.data_mut(), &buf);
        }
    }
}

fn node_cols<F: Scalar>(nodes: &[Node<F>], v: Var) -> usize {
    nodes[v.0].value.cols()
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stable in-place softmax; returns the log-sum-exp of the original row.
fn softmax_in_place<F: Scalar>(row: &mut [F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
    max + total.ln()
}

fn softmax_vjp_accumulate<F: Scalar>(dx: &mut [F], g: &[F], p: &[F]) {
    let dot: F = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
    for ((d, &gg), &pv) in dx.iter_mut().zip(g).zip(p) {
        *d += pv * (gg - dot);
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut cursor = 0;
    for s in segments {
        if s.start != cursor || s.len == 0 {
            return Err(TensorError::Config(format!(
                "segments must tile rows contiguously; got {s:?} at row {cursor}"
            )));
        }
        cursor = s.end();
    }
    if cursor != rows {
        return Err(TensorError::Config(format!(
            "segments cover {cursor} rows, input has {rows}"
        )));
    }
    Ok(())
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` when the node does not require grad or was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let ones = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let y = g.matmul(r, ones).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn conv1d_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let x5 = g.constant(t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.conv1d(x5, w, b, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0, 5.0]);

        assert!(matches!(g.conv1d(x, w, b, 0), Err(TensorError::Config(_))));
    }

    #[test]
    fn conv1d_k1_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let c = g.constant(t(&[1, 2], &[5.0, 5.0]));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let g1 = g.constant(t(&[1], &[1.0]));
        let x1 = g.constant(t(&[1, 1], &[1.0]));
        assert!(g.layer_norm(x1, g1, g1, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let bias = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let x = g.constant(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let xs = g.constant(t(&[1, 3], &[7.5, 6.0, 9.0]));
        let a = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let b = g.layer_norm(xs, gain, bias, 1e-5).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-9);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[5, 8]));
        let l = g.softmax_cross_entropy(uniform, &[0, 1, 2, 3, 4], &[true; 5]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 4];
        peaked[2] = 1000.0;
        let p = g.constant(t(&[1, 4], &peaked));
        let l = g.softmax_cross_entropy(p, &[2], &[true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let h = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let l = g.softmax_cross_entropy(h, &[1], &[true]).unwrap();
        let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        assert_eq!(
            g.softmax_cross_entropy(h, &[1], &[false]).unwrap_err(),
            TensorError::EmptyLoss
        );
        assert!(g.softmax_cross_entropy(h, &[7], &[true]).is_err());
    }

    #[test]
    fn backward_of_weighted_sum_is_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let x = g.constant(t(&[1, 3], &[1.5, 2.0, -4.0]));
        let unused = g.param(t(&[2], &[1.0, 2.0]));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, 2.0, -4.0]);
        assert!(grads.get(x).is_none());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn masked_rows_get_zero_logit_gradient() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(t(&[3, 2], &[0.1, 0.2, 0.3, -0.4, 2.0, 1.0]));
        let loss = g
            .softmax_cross_entropy(logits, &[0, 1, 0], &[true, false, true])
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(logits).unwrap();
        assert_eq!(d.row(1), &[0.0, 0.0]);
        assert!(d.row(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn segments_must_tile() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::zeros(&[4, 2]));
        assert!(g
            .attention(q, q, q, &[Segment::new(0, 2), Segment::new(3, 1)], 1, true)
            .is_err());
        assert!(g.attention(q, q, q, &[Segment::new(0, 4)], 3, true).is_err());
    }
}
