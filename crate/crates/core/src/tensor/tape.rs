//! Recording tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output values and enough
//! metadata to compute vector-Jacobian products. `backward` walks the nodes
//! in reverse, accumulating gradients into every leaf that asked for them.
//! Tensors are immutable once created; one tape serves one forward/backward
//! pass and is then dropped.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels;

/// Additive attention mask over an n-by-n score matrix.
///
/// `allowed[i*n+j] == true` means position j may be attended from position i
/// (mask entry 0); `false` means the pair is masked (the -inf entry). The
/// softmax implementation guarantees masked probabilities are exactly 0.0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_allowed(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::Shape {
                op: "AttnMask::from_allowed",
                detail: format!("expected {}x{} entries, got {}", n, n, allowed.len()),
            });
        }
        Ok(AttnMask { n, allowed })
    }

    /// Build from an adjacency-matrix predicate, forcing self-loops on the
    /// diagonal so no row is ever fully masked.
    pub fn from_adjacency(n: usize, mut edge: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = i == j || edge(i, j);
            }
        }
        AttnMask { n, allowed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// Row slice of the allowed matrix.
    pub fn allowed_row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    /// The additive value at (i, j): 0.0 for allowed pairs, a large negative
    /// sentinel standing in for -inf otherwise.
    pub fn additive(&self, i: usize, j: usize) -> f32 {
        if self.is_allowed(i, j) {
            0.0
        } else {
            NEG_SENTINEL
        }
    }
}

/// Large negative sentinel standing in for -inf in additive masks.
pub const NEG_SENTINEL: f32 = -1e9;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = a @ b
    Matmul { a: usize, b: usize },
    /// out = a @ b^T
    MatmulTransB { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    /// out[i,j] = a[i,j] + v[j]
    AddRow { a: usize, v: usize },
    /// out[i,j] = a[i,j] * v[j]
    MulRow { a: usize, v: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    /// Per-row layer normalization with learnable affine.
    LayerNorm { a: usize, scale: usize, shift: usize, stats: Vec<(f32, f32)> },
    /// Per-row softmax; masked entries were zeroed at forward time, so the
    /// probabilities alone determine the backward rule.
    SoftmaxRows { a: usize },
    /// Rotary position transform applied per head slice.
    Rope { a: usize, heads: usize, cos: Vec<f32>, sin: Vec<f32> },
    /// out[r] = table[ids[r]]
    GatherRows { table: usize, ids: Vec<u32> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    Reshape { a: usize },
    /// Scalar cross-entropy of one logit row against a class label.
    CrossEntropy { logits: usize, label: usize, probs: Vec<f32> },
    /// Scalar mean of scalar nodes.
    MeanScalars { parts: Vec<usize> },
    /// Scalar sum of all elements.
    SumElems { a: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Recording tape: owns all intermediate values of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f32>, op: Op, needs_grad: bool) -> TensorRef {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, op, needs_grad });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn node(&self, t: TensorRef) -> &Node {
        &self.nodes[t.0]
    }

    pub fn rows(&self, t: TensorRef) -> usize {
        self.node(t).rows
    }

    pub fn cols(&self, t: TensorRef) -> usize {
        self.node(t).cols
    }

    pub fn value(&self, t: TensorRef) -> &[f32] {
        &self.node(t).data
    }

    /// Gradient of the last backward target with respect to `t`, if any flowed.
    pub fn grad(&self, t: TensorRef) -> Option<&[f32]> {
        self.grads[t.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Count of recorded ops per op name; used by structural tests.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            let name = match n.op {
                Op::Leaf => "leaf",
                Op::Matmul { .. } => "matmul",
                Op::MatmulTransB { .. } => "matmul_transb",
                Op::Add { .. } => "add",
                Op::Sub { .. } => "sub",
                Op::Mul { .. } => "mul",
                Op::Scale { .. } => "scale",
                Op::AddRow { .. } => "add_row",
                Op::MulRow { .. } => "mul_row",
                Op::Sigmoid { .. } => "sigmoid",
                Op::Gelu { .. } => "gelu",
                Op::LayerNorm { .. } => "layernorm",
                Op::SoftmaxRows { .. } => "softmax",
                Op::Rope { .. } => "rope",
                Op::GatherRows { .. } => "gather_rows",
                Op::ConcatCols { .. } => "concat_cols",
                Op::SliceCols { .. } => "slice_cols",
                Op::Reshape { .. } => "reshape",
                Op::CrossEntropy { .. } => "cross_entropy",
                Op::MeanScalars { .. } => "mean_scalars",
                Op::SumElems { .. } => "sum_elems",
            };
            *m.entry(name).or_insert(0) += 1;
        }
        m
    }

    /// Verify all values of `t` are finite.
    pub fn check_finite(&self, t: TensorRef, context: impl Fn() -> String) -> Result<()> {
        if self.value(t).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context() })
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register a leaf that wants a gradient (a parameter).
    pub fn leaf_grad(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> TensorRef {
        self.push(rows, cols, data, Op::Leaf, true)
    }

    /// Register a constant leaf (no gradient tracked).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> TensorRef {
        self.push(rows, cols, data, Op::Leaf, false)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}x{k}] @ [{k2}x{n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(m, n, out, Op::Matmul { a: a.0, b: b.0 }, g))
    }

    /// a @ b^T, with a: [m,k] and b: [n,k].
    pub fn matmul_transb(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_transb",
                detail: format!("[{m}x{k}] @ [{n}x{k2}]^T"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_transb(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(m, n, out, Op::MatmulTransB { a: a.0, b: b.0 }, g))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if (r, c) != (self.rows(b), self.cols(b)) {
            return Err(Error::Shape {
                op: op_name,
                detail: format!(
                    "[{r}x{c}] vs [{}x{}]",
                    self.rows(b),
                    self.cols(b)
                ),
            });
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(r, c, out, op, g))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: TensorRef, c: f32) -> TensorRef {
        let (r, cl) = (self.rows(a), self.cols(a));
        let out: Vec<f32> = self.value(a).iter().map(|&x| x * c).collect();
        let g = self.node(a).needs_grad;
        self.push(r, cl, out, Op::Scale { a: a.0, c }, g)
    }

    fn rowwise(
        &mut self,
        op_name: &'static str,
        a: TensorRef,
        v: TensorRef,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if self.node(v).numel() != c {
            return Err(Error::Shape {
                op: op_name,
                detail: format!("[{r}x{c}] with row vector of {}", self.node(v).numel()),
            });
        }
        let va = self.value(a);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(va[i * c + j], vv[j]));
            }
        }
        let g = self.node(a).needs_grad || self.node(v).needs_grad;
        Ok(self.push(r, c, out, op, g))
    }

    /// Broadcast-add a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: TensorRef, v: TensorRef) -> Result<TensorRef> {
        self.rowwise("add_row", a, v, |x, y| x + y, Op::AddRow { a: a.0, v: v.0 })
    }

    /// Broadcast-multiply every row by a length-`cols` vector.
    pub fn mul_row(&mut self, a: TensorRef, v: TensorRef) -> Result<TensorRef> {
        self.rowwise("mul_row", a, v, |x, y| x * y, Op::MulRow { a: a.0, v: v.0 })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = (self.rows(a), self.cols(a));
        let out: Vec<f32> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let g = self.node(a).needs_grad;
        self.push(r, c, out, Op::Sigmoid { a: a.0 }, g)
    }

    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = (self.rows(a), self.cols(a));
        let out: Vec<f32> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let g = self.node(a).needs_grad;
        self.push(r, c, out, Op::Gelu { a: a.0 }, g)
    }

    /// Layer normalization over the last dimension with learnable affine.
    /// `scale` and `shift` are length-`cols` vectors.
    pub fn layernorm(&mut self, a: TensorRef, scale: TensorRef, shift: TensorRef) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if self.node(scale).numel() != c || self.node(shift).numel() != c {
            return Err(Error::Shape {
                op: "layernorm",
                detail: format!(
                    "[{r}x{c}] with affine of {}/{}",
                    self.node(scale).numel(),
                    self.node(shift).numel()
                ),
            });
        }
        let x = self.value(a);
        let g = self.value(scale);
        let b = self.value(shift);
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = kernels::sum(row) / c as f32;
            let mut var = 0.0;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= c as f32;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, inv_std));
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                out[i * c + j] = xhat * g[j] + b[j];
            }
        }
        let needs = self.node(a).needs_grad || self.node(scale).needs_grad || self.node(shift).needs_grad;
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm { a: a.0, scale: scale.0, shift: shift.0, stats },
            needs,
        ))
    }

    /// Row-wise softmax with an optional additive mask.
    ///
    /// Masked positions come out exactly 0.0: the row max is taken over
    /// unmasked entries only, sentinel-shifted exponentials underflow to zero,
    /// and the positions are zeroed explicitly afterwards. A fully masked row
    /// is an error (self-loops upstream should make it impossible).
    pub fn softmax_rows(&mut self, a: TensorRef, mask: Option<Arc<AttnMask>>) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(m) = &mask {
            if m.n() != r || m.n() != c {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    detail: format!("scores [{r}x{c}] vs mask [{0}x{0}]", m.n()),
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            let mrow = mask.as_ref().map(|m| m.allowed_row(i));
            let open = |j: usize| mrow.map_or(true, |m| m[j]);
            let mut mx = f32::NEG_INFINITY;
            for j in 0..c {
                if open(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f32::NEG_INFINITY {
                return Err(Error::AllMaskedRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..c {
                if open(j) {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            let inv = 1.0 / denom;
            for j in 0..c {
                // masked entries stay at their exact-zero initialization
                if open(j) {
                    orow[j] *= inv;
                }
            }
        }
        let g = self.node(a).needs_grad;
        Ok(self.push(r, c, out, Op::SoftmaxRows { a: a.0 }, g))
    }

    /// Apply rotary position embedding per head slice.
    ///
    /// `a` is [L, d] with `d = heads * d_k`; within each head, dimension pairs
    /// (2j, 2j+1) are rotated by `positions[row] * base^(-2j/d_k)`.
    pub fn rope(&mut self, a: TensorRef, heads: usize, positions: &[u32], base: f32) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if c % heads != 0 || (c / heads) % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("cols {c} not divisible into even-sized slices for {heads} heads"),
            });
        }
        if positions.len() != r {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("{} positions for {r} rows", positions.len()),
            });
        }
        let d_k = c / heads;
        let half = d_k / 2;
        // cos/sin cached per (row, pair); shared by every head.
        let mut cos = Vec::with_capacity(r * half);
        let mut sin = Vec::with_capacity(r * half);
        for &pos in positions {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f32 / d_k as f32);
                let angle = pos as f32 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for h in 0..heads {
                let off = i * c + h * d_k;
                for j in 0..half {
                    let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                    let x0 = x[off + 2 * j];
                    let x1 = x[off + 2 * j + 1];
                    out[off + 2 * j] = x0 * cs - x1 * sn;
                    out[off + 2 * j + 1] = x0 * sn + x1 * cs;
                }
            }
        }
        let g = self.node(a).needs_grad;
        Ok(self.push(r, c, out, Op::Rope { a: a.0, heads, cos, sin }, g))
    }

    /// Gather rows of `table` by id; the embedding lookup.
    pub fn gather_rows(&mut self, table: TensorRef, ids: &[u32]) -> Result<TensorRef> {
        let (v, d) = (self.rows(table), self.cols(table));
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows id",
                    index: id as usize,
                    len: v,
                });
            }
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
        }
        let g = self.node(table).needs_grad;
        Ok(self.push(ids.len(), d, out, Op::GatherRows { table: table.0, ids: ids.to_vec() }, g))
    }

    /// Concatenate along columns; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let r = self.rows(parts[0]);
        let mut total = 0;
        for &p in parts {
            if self.rows(p) != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch {} vs {}", self.rows(p), r),
                });
            }
            total += self.cols(p);
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let g = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(r, total, out, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, g))
    }

    /// Take columns [start, start+len) of every row.
    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {c} cols", start + len),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let g = self.node(a).needs_grad;
        Ok(self.push(r, len, out, Op::SliceCols { a: a.0, start, len }, g))
    }

    /// Reinterpret the buffer with a new (rows, cols) of equal element count.
    pub fn reshape(&mut self, a: TensorRef, rows: usize, cols: usize) -> Result<TensorRef> {
        if rows * cols != self.node(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{} elements into [{rows}x{cols}]", self.node(a).numel()),
            });
        }
        let data = self.value(a).to_vec();
        let g = self.node(a).needs_grad;
        Ok(self.push(rows, cols, data, Op::Reshape { a: a.0 }, g))
    }

    /// Cross-entropy of a single logit row against an integer label.
    pub fn cross_entropy(&mut self, logits: TensorRef, label: usize) -> Result<TensorRef> {
        let n = self.node(logits).numel();
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let x = self.value(logits);
        let mx = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0;
        let mut probs = vec![0.0; n];
        for j in 0..n {
            let e = (x[j] - mx).exp();
            probs[j] = e;
            denom += e;
        }
        let inv = 1.0 / denom;
        for p in probs.iter_mut() {
            *p *= inv;
        }
        let loss = denom.ln() - (x[label] - mx);
        let g = self.node(logits).needs_grad;
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits: logits.0, label, probs }, g))
    }

    /// Mean of scalar nodes (used to average per-step losses).
    pub fn mean_scalars(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "mean_scalars",
                detail: "no parts".into(),
            });
        }
        let mut s = 0.0;
        for &p in parts {
            if self.node(p).numel() != 1 {
                return Err(Error::Shape {
                    op: "mean_scalars",
                    detail: "non-scalar part".into(),
                });
            }
            s += self.value(p)[0];
        }
        let g = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            1,
            1,
            vec![s / parts.len() as f32],
            Op::MeanScalars { parts: parts.iter().map(|p| p.0).collect() },
            g,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_elems(&mut self, a: TensorRef) -> TensorRef {
        let s = kernels::sum(self.value(a));
        let g = self.node(a).needs_grad;
        self.push(1, 1, vec![s], Op::SumElems { a: a.0 }, g)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep seeding `target` (a scalar) with gradient 1.
    pub fn backward(&mut self, target: TensorRef) -> Result<()> {
        if self.node(target).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: "target must be scalar".into(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[target.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn accum(&mut self, idx: usize, contrib: &[f32]) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => self.grads[idx] = Some(contrib.to_vec()),
        }
    }

    fn accum_at(&mut self, idx: usize, at: usize, v: f32) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let n = self.nodes[idx].numel();
        let g = self.grads[idx].get_or_insert_with(|| vec![0.0; n]);
        g[at] += v;
    }

    fn backprop_node(&mut self, idx: usize, dy: &[f32]) {
        // Ops are dispatched by shape bookkeeping recorded at forward time.
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let k = self.nodes[a].cols;
                if self.nodes[a].needs_grad {
                    // dA = dY @ B^T
                    let mut da = vec![0.0; rows * k];
                    kernels::matmul_transb(dy, &self.nodes[b].data, &mut da, rows, cols, k);
                    self.accum(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T @ dY
                    let mut db = vec![0.0; k * cols];
                    kernels::matmul_transa_acc(&self.nodes[a].data, dy, &mut db, rows, k, cols);
                    self.accum(b, &db);
                }
            }
            Op::MatmulTransB { a, b } => {
                let (a, b) = (*a, *b);
                let k = self.nodes[a].cols;
                if self.nodes[a].needs_grad {
                    // dA = dY @ B
                    let mut da = vec![0.0; rows * k];
                    kernels::matmul_acc(dy, &self.nodes[b].data, &mut da, rows, cols, k);
                    self.accum(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = dY^T @ A
                    let mut db = vec![0.0; cols * k];
                    kernels::matmul_transa_acc(dy, &self.nodes[a].data, &mut db, rows, cols, k);
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                self.accum(b, dy);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                if self.nodes[b].needs_grad {
                    let neg: Vec<f32> = dy.iter().map(|&v| -v).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da: Vec<f32> = dy.iter().zip(&self.nodes[b].data).map(|(&d, &v)| d * v).collect();
                    self.accum(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<f32> = dy.iter().zip(&self.nodes[a].data).map(|(&d, &v)| d * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.nodes[a].needs_grad {
                    let da: Vec<f32> = dy.iter().map(|&v| v * c).collect();
                    self.accum(a, &da);
                }
            }
            Op::AddRow { a, v } => {
                let (a, v) = (*a, *v);
                self.accum(a, dy);
                if self.nodes[v].needs_grad {
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += dy[i * cols + j];
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::MulRow { a, v } => {
                let (a, v) = (*a, *v);
                if self.nodes[a].needs_grad {
                    let vv = &self.nodes[v].data;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = dy[i * cols + j] * vv[j];
                        }
                    }
                    self.accum(a, &da);
                }
                if self.nodes[v].needs_grad {
                    let xa = &self.nodes[a].data;
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += dy[i * cols + j] * xa[i * cols + j];
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let y = &self.nodes[idx].data;
                    let da: Vec<f32> = dy.iter().zip(y).map(|(&d, &s)| d * s * (1.0 - s)).collect();
                    self.accum(a, &da);
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let x = &self.nodes[a].data;
                    let da: Vec<f32> = dy.iter().zip(x).map(|(&d, &v)| d * gelu_grad(v)).collect();
                    self.accum(a, &da);
                }
            }
            Op::LayerNorm { a, scale, shift, stats } => {
                let (a, scale, shift) = (*a, *scale, *shift);
                let stats = stats.clone();
                let x = self.nodes[a].data.clone();
                let g = self.nodes[scale].data.clone();
                if self.nodes[shift].needs_grad {
                    let mut db = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += dy[i * cols + j];
                        }
                    }
                    self.accum(shift, &db);
                }
                if self.nodes[scale].needs_grad {
                    let mut dg = vec![0.0; cols];
                    for i in 0..rows {
                        let (mean, inv_std) = stats[i];
                        for j in 0..cols {
                            let xhat = (x[i * cols + j] - mean) * inv_std;
                            dg[j] += dy[i * cols + j] * xhat;
                        }
                    }
                    self.accum(scale, &dg);
                }
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; rows * cols];
                    let nf = cols as f32;
                    for i in 0..rows {
                        let (mean, inv_std) = stats[i];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (x[i * cols + j] - mean) * inv_std;
                            let dxhat = dy[i * cols + j] * g[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= nf;
                        mean_dxhat_xhat /= nf;
                        for j in 0..cols {
                            let xhat = (x[i * cols + j] - mean) * inv_std;
                            let dxhat = dy[i * cols + j] * g[j];
                            da[i * cols + j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.accum(a, &da);
                }
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let p = &self.nodes[idx].data;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += dy[base + j] * p[base + j];
                        }
                        for j in 0..cols {
                            da[base + j] = p[base + j] * (dy[base + j] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
            }
            Op::Rope { a, heads, cos, sin } => {
                let (a, heads) = (*a, *heads);
                if self.nodes[a].needs_grad {
                    let d_k = cols / heads;
                    let half = d_k / 2;
                    let (cos, sin) = (cos.clone(), sin.clone());
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for h in 0..heads {
                            let off = i * cols + h * d_k;
                            for j in 0..half {
                                let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                                let d0 = dy[off + 2 * j];
                                let d1 = dy[off + 2 * j + 1];
                                // transpose of the rotation
                                da[off + 2 * j] = d0 * cs + d1 * sn;
                                da[off + 2 * j + 1] = -d0 * sn + d1 * cs;
                            }
                        }
                    }
                    self.accum(a, &da);
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                if self.nodes[table].needs_grad {
                    let ids = ids.clone();
                    let d = cols;
                    let n = self.nodes[table].numel();
                    let g = self.grads[table].get_or_insert_with(|| vec![0.0; n]);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        for j in 0..d {
                            g[dst + j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let c = self.nodes[p].cols;
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&dy[i * cols + start..i * cols + start + c]);
                        }
                        self.accum(p, &dp);
                    }
                    start += c;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.nodes[a].needs_grad {
                    let ac = self.nodes[a].cols;
                    let n = self.nodes[a].numel();
                    let g = self.grads[a].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..rows {
                        for j in 0..len {
                            g[i * ac + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                self.accum(*a, dy);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let (logits, label) = (*logits, *label);
                if self.nodes[logits].needs_grad {
                    let probs = probs.clone();
                    let d = dy[0];
                    let mut dl: Vec<f32> = probs.iter().map(|&p| p * d).collect();
                    dl[label] -= d;
                    self.accum(logits, &dl);
                }
            }
            Op::MeanScalars { parts } => {
                let parts = parts.clone();
                let w = dy[0] / parts.len() as f32;
                for p in parts {
                    self.accum_at(p, 0, w);
                }
            }
            Op::SumElems { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].numel();
                    let da = vec![dy[0]; n];
                    self.accum(a, &da);
                }
            }
        }
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Rational tanh (7,6 Pade with saturation). Max error ~1e-6 on the active
/// range; an order of magnitude faster than libm and fully deterministic.
/// The GELU gradient differentiates the same approximation, so analytic and
/// finite-difference gradients agree by construction.
#[inline]
pub(crate) fn fast_tanh(x: f32) -> f32 {
    if x.abs() >= 4.97 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let x2 = x * x;
    let p = x * (135_135.0 + x2 * (17_325.0 + x2 * (378.0 + x2)));
    let q = 135_135.0 + x2 * (62_370.0 + x2 * (3_150.0 + x2 * 28.0));
    p / q
}

/// tanh-approximated GELU; the gradient below differentiates this exact form.
pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    0.5 * x * (1.0 + fast_tanh(C * (x + A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = fast_tanh(u);
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}
