//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation as it executes. Nodes are
//! appended in execution order, so the record is already topologically sorted;
//! [`Tape::backward`] walks it in exact reverse order accumulating gradients.
//! The tape is rebuilt on every forward pass.

use super::kernels;
use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional real array, the universal numeric carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// `b`'s shape is a suffix of `a`'s shape; `b` is tiled over the leading axes.
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Matmul(MatmulRec),
    SwapAxes { a: usize, ax1: usize, ax2: usize },
    Reshape { a: usize },
    Relu { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
    SoftmaxLast { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64 },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    NarrowLast { a: usize, start: usize, len: usize },
}

#[derive(Debug, Clone)]
struct MatmulRec {
    a: usize,
    b: usize,
    /// Number of [m,k] blocks in `a`.
    bcount: usize,
    m: usize,
    k: usize,
    n: usize,
    /// When true `b` is a single [k,n] matrix shared by every batch.
    b_shared: bool,
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Gradient tape. Operations validate shapes, compute forward values eagerly,
/// and record enough state for the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag is respected.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Record a non-trainable input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> Var {
        let t = Tensor { shape, data, grad: None, requires_grad: requires };
        self.push(t, op)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch { op: "add", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let data: Vec<f64> = ta.data.iter().zip(tb.data.iter()).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::Add { a: a.0, b: b.0 }, req))
    }

    /// Add `b` to `a`, tiling `b` over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let suffix_ok = tb.shape.len() <= ta.shape.len()
            && ta.shape[ta.shape.len() - tb.shape.len()..] == tb.shape[..];
        if !suffix_ok || tb.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let bn = tb.numel();
        let mut data = ta.data.clone();
        for chunk in data.chunks_exact_mut(bn) {
            for (o, &bv) in chunk.iter_mut().zip(tb.data.iter()) {
                *o += bv;
            }
        }
        let shape = ta.shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::AddBroadcast { a: a.0, b: b.0 }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch { op: "mul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let data: Vec<f64> = ta.data.iter().zip(tb.data.iter()).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::Mul { a: a.0, b: b.0 }, req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].tensor;
        let data: Vec<f64> = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        let req = self.requires(a);
        self.push_derived(shape, data, Op::Scale { a: a.0, c }, req)
    }

    /// Matrix product. Supported layouts:
    /// - `[m,k] x [k,n]`
    /// - `[..,m,k] x [k,n]` (leading axes flattened into rows)
    /// - `[..,m,k] x [..,k,n]` with identical leading axes (batched)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let (ra, rb) = (ta.rank(), tb.rank());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.nodes[a.0].tensor.shape.clone(),
            rhs: self.nodes[b.0].tensor.shape.clone(),
        };
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let k = ta.shape[ra - 1];
        if tb.shape[rb - 2] != k {
            return Err(mismatch());
        }
        let n = tb.shape[rb - 1];
        let (rec, out_shape) = if rb == 2 {
            // flatten every leading axis of a into rows
            let rows = ta.numel() / k;
            let mut out_shape = ta.shape.clone();
            *out_shape.last_mut().unwrap() = n;
            (
                MatmulRec { a: a.0, b: b.0, bcount: 1, m: rows, k, n, b_shared: true },
                out_shape,
            )
        } else {
            if ra != rb || ta.shape[..ra - 2] != tb.shape[..rb - 2] {
                return Err(mismatch());
            }
            let m = ta.shape[ra - 2];
            let bcount: usize = ta.shape[..ra - 2].iter().product();
            let mut out_shape = ta.shape.clone();
            out_shape[ra - 2] = m;
            out_shape[ra - 1] = n;
            (
                MatmulRec { a: a.0, b: b.0, bcount, m, k, n, b_shared: false },
                out_shape,
            )
        };
        let mut data = vec![0.0; rec.bcount * rec.m * n];
        let (adata, bdata) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
        for bi in 0..rec.bcount {
            let asl = &adata[bi * rec.m * k..(bi + 1) * rec.m * k];
            let bsl = if rec.b_shared { &bdata[..] } else { &bdata[bi * k * n..(bi + 1) * k * n] };
            let osl = &mut data[bi * rec.m * n..(bi + 1) * rec.m * n];
            kernels::matmul_acc(asl, bsl, osl, rec.m, k, n);
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(out_shape, data, Op::Matmul(rec), req))
    }

    pub fn swap_axes(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        if ax1 >= ta.rank() || ax2 >= ta.rank() {
            return Err(Error::InvalidArgument(format!(
                "swap_axes({ax1},{ax2}) out of range for rank {}",
                ta.rank()
            )));
        }
        let (data, shape) = swap_axes_copy(&ta.data, &ta.shape, ax1, ax2);
        let req = self.requires(a);
        Ok(self.push_derived(shape, data, Op::SwapAxes { a: a.0, ax1, ax2 }, req))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: ta.shape.clone(), rhs: shape });
        }
        let data = ta.data.clone();
        let req = self.requires(a);
        Ok(self.push_derived(shape, data, Op::Reshape { a: a.0 }, req))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].tensor;
        let data: Vec<f64> = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        let req = self.requires(a);
        self.push_derived(shape, data, Op::Relu { a: a.0 }, req)
    }

    /// Inverted dropout: zero each element with probability `p` and scale
    /// survivors by 1/(1-p). In eval mode (`training == false`) or at `p == 0`
    /// this is the identity.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p={p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let ta = &self.nodes[a.0].tensor;
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let ta = &self.nodes[a.0].tensor;
        let data: Vec<f64> = ta.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let shape = ta.shape.clone();
        let req = self.requires(a);
        Ok(self.push_derived(shape, data, Op::Dropout { a: a.0, mask }, req))
    }

    /// Numerically stable softmax along the last axis. Each output slice is
    /// nonnegative and sums to 1.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].tensor;
        let d = *ta.shape.last().expect("softmax on rank-0 tensor");
        let mut data = vec![0.0; ta.numel()];
        for (orow, arow) in data.chunks_exact_mut(d).zip(ta.data.chunks_exact(d)) {
            softmax_row(arow, orow);
        }
        let shape = ta.shape.clone();
        let req = self.requires(a);
        self.push_derived(shape, data, Op::SoftmaxLast { a: a.0 }, req)
    }

    /// Layer normalization over the last axis, then affine scale/shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ta, tg, tb) = (
            &self.nodes[a.0].tensor,
            &self.nodes[gamma.0].tensor,
            &self.nodes[beta.0].tensor,
        );
        let d = *ta.shape.last().unwrap_or(&0);
        if tg.shape != [d] || tb.shape != [d] || eps <= 0.0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: ta.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let mut data = vec![0.0; ta.numel()];
        for (orow, arow) in data.chunks_exact_mut(d).zip(ta.data.chunks_exact(d)) {
            let mean = arow.iter().sum::<f64>() / d as f64;
            let var = arow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ((o, &x), (&g, &b)) in orow
                .iter_mut()
                .zip(arow.iter())
                .zip(tg.data.iter().zip(tb.data.iter()))
            {
                *o = (x - mean) * inv_std * g + b;
            }
        }
        let shape = ta.shape.clone();
        let req = self.requires(a) || self.requires(gamma) || self.requires(beta);
        Ok(self.push_derived(
            shape,
            data,
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, eps },
            req,
        ))
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let rank = ta.rank();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("mean_axis {axis} out of range for rank {rank}")));
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let asize = ta.shape[axis];
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let mut out_shape = ta.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..asize {
                let base = (o * asize + s) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += ta.data[base + i];
                }
            }
        }
        let scale = 1.0 / asize as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        let req = self.requires(a);
        Ok(self.push_derived(out_shape, data, Op::MeanAxis { a: a.0, axis }, req))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].tensor.data.iter().sum();
        let req = self.requires(a);
        self.push_derived(vec![1], vec![s], Op::SumAll { a: a.0 }, req)
    }

    /// Mean over the batch of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].tensor;
        if tl.rank() != 2 || tl.shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (b, c) = (tl.shape[0], tl.shape[1]);
        let mut total = 0.0;
        for (row, &t) in tl.data.chunks_exact(c).zip(targets.iter()) {
            if t >= c {
                return Err(Error::InvalidArgument(format!("target {t} out of range for {c} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        let req = self.requires(logits);
        Ok(self.push_derived(
            vec![1],
            vec![total / b as f64],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            req,
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let d = *ta.shape.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow_last [{start}, {}) out of range for last dim {d}",
                start + len
            )));
        }
        let rows = ta.numel() / d;
        let mut data = vec![0.0; rows * len];
        for (orow, arow) in data.chunks_exact_mut(len).zip(ta.data.chunks_exact(d)) {
            orow.copy_from_slice(&arow[start..start + len]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = len;
        let req = self.requires(a);
        Ok(self.push_derived(shape, data, Op::NarrowLast { a: a.0, start, len }, req))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor
    /// with `requires_grad` reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::InvalidArgument("backward requires a scalar loss".into()));
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            } else {
                node.tensor.grad = None;
            }
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = 1.0;
        } else {
            return Ok(()); // loss does not depend on any trainable input
        }

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].tensor.grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].tensor.grad.take().unwrap();
            match op {
                Op::Leaf => {
                    self.nodes[idx].tensor.grad = Some(g);
                    continue;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddBroadcast { a, b } => {
                    self.accumulate(a, &g);
                    if self.nodes[b].tensor.requires_grad {
                        let bn = self.nodes[b].tensor.numel();
                        let mut db = vec![0.0; bn];
                        for chunk in g.chunks_exact(bn) {
                            for (d, &gv) in db.iter_mut().zip(chunk.iter()) {
                                *d += gv;
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].tensor.requires_grad {
                        let da: Vec<f64> =
                            g.iter().zip(self.nodes[b].tensor.data.iter()).map(|(gv, bv)| gv * bv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].tensor.requires_grad {
                        let db: Vec<f64> =
                            g.iter().zip(self.nodes[a].tensor.data.iter()).map(|(gv, av)| gv * av).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.nodes[a].tensor.requires_grad {
                        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Matmul(rec) => self.backward_matmul(&rec, &g),
                Op::SwapAxes { a, ax1, ax2 } => {
                    if self.nodes[a].tensor.requires_grad {
                        let out_shape = {
                            let mut s = self.nodes[a].tensor.shape.clone();
                            s.swap(ax1, ax2);
                            s
                        };
                        let (da, _) = swap_axes_copy(&g, &out_shape, ax1, ax2);
                        self.accumulate(a, &da);
                    }
                }
                Op::Reshape { a } => self.accumulate(a, &g),
                Op::Relu { a } => {
                    if self.nodes[a].tensor.requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[a].tensor.data.iter())
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Dropout { a, mask } => {
                    if self.nodes[a].tensor.requires_grad {
                        let da: Vec<f64> = g.iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::SoftmaxLast { a } => {
                    if self.nodes[a].tensor.requires_grad {
                        let d = *self.nodes[idx].tensor.shape.last().unwrap();
                        let sdata = &self.nodes[idx].tensor.data;
                        let mut da = vec![0.0; g.len()];
                        for ((darow, grow), srow) in
                            da.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(sdata.chunks_exact(d))
                        {
                            let dot: f64 = grow.iter().zip(srow.iter()).map(|(gv, sv)| gv * sv).sum();
                            for ((dv, &gv), &sv) in darow.iter_mut().zip(grow.iter()).zip(srow.iter()) {
                                *dv = sv * (gv - dot);
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    self.backward_layer_norm(a, gamma, beta, eps, &g);
                }
                Op::MeanAxis { a, axis } => {
                    if self.nodes[a].tensor.requires_grad {
                        let shape = &self.nodes[a].tensor.shape;
                        let outer: usize = shape[..axis].iter().product();
                        let asize = shape[axis];
                        let inner: usize = shape[axis + 1..].iter().product();
                        let scale = 1.0 / asize as f64;
                        let mut da = vec![0.0; self.nodes[a].tensor.numel()];
                        for o in 0..outer {
                            for s in 0..asize {
                                let base = (o * asize + s) * inner;
                                let gbase = o * inner;
                                for i in 0..inner {
                                    da[base + i] = g[gbase + i] * scale;
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::SumAll { a } => {
                    if self.nodes[a].tensor.requires_grad {
                        let da = vec![g[0]; self.nodes[a].tensor.numel()];
                        self.accumulate(a, &da);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if self.nodes[logits].tensor.requires_grad {
                        let tl = &self.nodes[logits].tensor;
                        let (b, c) = (tl.shape[0], tl.shape[1]);
                        let mut da = vec![0.0; b * c];
                        let gscale = g[0] / b as f64;
                        for ((darow, lrow), &t) in
                            da.chunks_exact_mut(c).zip(tl.data.chunks_exact(c)).zip(targets.iter())
                        {
                            softmax_row(lrow, darow);
                            darow[t] -= 1.0;
                            darow.iter_mut().for_each(|v| *v *= gscale);
                        }
                        self.accumulate(logits, &da);
                    }
                }
                Op::NarrowLast { a, start, len } => {
                    if self.nodes[a].tensor.requires_grad {
                        let d = *self.nodes[a].tensor.shape.last().unwrap();
                        let mut da = vec![0.0; self.nodes[a].tensor.numel()];
                        for (darow, grow) in da.chunks_exact_mut(d).zip(g.chunks_exact(len)) {
                            darow[start..start + len].copy_from_slice(grow);
                        }
                        self.accumulate(a, &da);
                    }
                }
            }
            // interior gradients are dropped once consumed to bound memory
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, delta: &[f64]) {
        if let Some(g) = self.nodes[idx].tensor.grad.as_mut() {
            for (gv, &d) in g.iter_mut().zip(delta.iter()) {
                *gv += d;
            }
        }
    }

    fn backward_matmul(&mut self, rec: &MatmulRec, g: &[f64]) {
        let MatmulRec { a, b, bcount, m, k, n, b_shared } = *rec;
        let need_a = self.nodes[a].tensor.requires_grad;
        let need_b = self.nodes[b].tensor.requires_grad;
        if !need_a && !need_b {
            return;
        }
        let mut da = if need_a { vec![0.0; self.nodes[a].tensor.numel()] } else { Vec::new() };
        let mut db = if need_b { vec![0.0; self.nodes[b].tensor.numel()] } else { Vec::new() };
        let mut bt = vec![0.0; k * n];
        let mut at = vec![0.0; m * k];
        for bi in 0..bcount {
            let gsl = &g[bi * m * n..(bi + 1) * m * n];
            if need_a {
                // dA = dC * B^T
                let bsl = if b_shared {
                    &self.nodes[b].tensor.data[..]
                } else {
                    &self.nodes[b].tensor.data[bi * k * n..(bi + 1) * k * n]
                };
                kernels::transpose(bsl, &mut bt, k, n);
                let dasl = &mut da[bi * m * k..(bi + 1) * m * k];
                kernels::matmul_acc(gsl, &bt, dasl, m, n, k);
            }
            if need_b {
                // dB = A^T * dC, accumulated over batches when B is shared
                let asl = &self.nodes[a].tensor.data[bi * m * k..(bi + 1) * m * k];
                kernels::transpose(asl, &mut at, m, k);
                let dbsl = if b_shared { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                kernels::matmul_acc(&at, gsl, dbsl, k, m, n);
            }
        }
        if need_a {
            self.accumulate(a, &da);
        }
        if need_b {
            self.accumulate(b, &db);
        }
    }

    fn backward_layer_norm(&mut self, a: usize, gamma: usize, beta: usize, eps: f64, g: &[f64]) {
        let d = *self.nodes[a].tensor.shape.last().unwrap();
        let need_a = self.nodes[a].tensor.requires_grad;
        let need_g = self.nodes[gamma].tensor.requires_grad;
        let need_b = self.nodes[beta].tensor.requires_grad;
        if !(need_a || need_g || need_b) {
            return;
        }
        let xdata = self.nodes[a].tensor.data.clone();
        let gdata = self.nodes[gamma].tensor.data.clone();
        let mut da = vec![0.0; xdata.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let df = d as f64;
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for (row, (xrow, grow)) in xdata.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
            let mean = xrow.iter().sum::<f64>() / df;
            let var = xrow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / df;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                xhat[j] = (xrow[j] - mean) * inv_std;
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
                dxhat[j] = grow[j] * gdata[j];
            }
            if need_a {
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                let darow = &mut da[row * d..(row + 1) * d];
                for j in 0..d {
                    darow[j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
        }
        if need_a {
            self.accumulate(a, &da);
        }
        if need_g {
            self.accumulate(gamma, &dgamma);
        }
        if need_b {
            self.accumulate(beta, &dbeta);
        }
    }
}

fn softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(input.iter()) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|v| *v *= inv);
}

fn swap_axes_copy(src: &[f64], shape: &[usize], ax1: usize, ax2: usize) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut new_shape = shape.to_vec();
    new_shape.swap(ax1, ax2);
    if ax1 == ax2 {
        return (src.to_vec(), new_shape);
    }
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut perm_strides = strides;
    perm_strides.swap(ax1, ax2);
    let mut out = vec![0.0; src.len()];
    let mut coords = vec![0usize; rank];
    let mut sidx = 0usize;
    for o in out.iter_mut() {
        *o = src[sidx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            sidx += perm_strides[d];
            if coords[d] < new_shape[d] {
                break;
            }
            sidx -= perm_strides[d] * new_shape[d];
            coords[d] = 0;
        }
    }
    (out, new_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax_last(x);
        for &v in &tape.value(s).data {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
        // [0, ln 3] -> [0.25, 0.75]
        let y = tape.leaf(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let sy = tape.softmax_last(y);
        assert!(approx(tape.value(sy).data[0], 0.25, 1e-12));
        assert!(approx(tape.value(sy).data[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..50 {
            let xs: Vec<f64> = (0..7).map(|_| next()).collect();
            let c = next();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![7], xs).unwrap());
            let b = tape.leaf(Tensor::new(vec![7], shifted).unwrap());
            let sa = tape.softmax_last(a);
            let sb = tape.softmax_last(b);
            let (va, vb) = (&tape.value(sa).data, &tape.value(sb).data);
            let sum: f64 = va.iter().sum();
            assert!(approx(sum, 1.0, 1e-12));
            assert!(va.iter().all(|&v| v >= 0.0));
            for (x, y) in va.iter().zip(vb.iter()) {
                assert!(approx(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn layer_norm_constant_slice_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let g = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = tape.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in &tape.value(y).data {
            assert!(approx(v, 0.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_three_point_slice() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-8).unwrap();
        let v = &tape.value(y).data;
        assert!(approx(v[0], -1.2247, 1e-3));
        assert!(approx(v[1], 0.0, 1e-3));
        assert!(approx(v[2], 1.2247, 1e-3));
    }

    #[test]
    fn layer_norm_output_statistics() {
        // |mean| < 1e-9 and |var - 1| < 1e-6 with unit gamma, zero beta
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin() * 10.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 8], data).unwrap());
        let g = tape.leaf(Tensor::new(vec![8], vec![1.0; 8]).unwrap());
        let b = tape.leaf(Tensor::new(vec![8], vec![0.0; 8]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data.chunks_exact(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_identities() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let same = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(same, x);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 8], vec![0.3; 16]).unwrap());
        let loss = tape.cross_entropy(logits, &[0, 5]).unwrap();
        assert!(approx(tape.value(loss).data[0], 8.0f64.ln(), 1e-12));

        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!(approx(tape.value(loss).data[0], -(0.75f64.ln()), 1e-12));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![40.0, 0.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).data[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        assert!(tape.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn matmul_gradient_matches_ones_bt() {
        // d sum(A*B) / dA = ones * B^T
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_grad();
        let b = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap().with_grad();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let ga = tape.grad(va).unwrap();
        // ones[2,2] * B^T[2,3]: row i of dA = column sums of B rows -> [b00+b01, b10+b11, b20+b21]
        let expected = [-0.5, 2.25, 0.75, -0.5, 2.25, 0.75];
        for (g, e) in ga.iter().zip(expected.iter()) {
            assert!(approx(*g, *e, 1e-12), "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn batched_matmul_matches_loop_of_2d() {
        let adata: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.31).sin()).collect();
        let bdata: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64 * 0.17).cos()).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3, 4], adata.clone()).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 4, 5], bdata.clone()).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape, vec![2, 3, 5]);
        for bi in 0..2 {
            let mut expect = vec![0.0; 15];
            kernels::matmul(&adata[bi * 12..(bi + 1) * 12], &bdata[bi * 20..(bi + 1) * 20], &mut expect, 3, 4, 5);
            assert_eq!(&tape.value(c).data[bi * 15..(bi + 1) * 15], &expect[..]);
        }
    }

    #[test]
    fn swap_axes_round_trip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let s = tape.swap_axes(a, 0, 2).unwrap();
        assert_eq!(tape.value(s).shape, vec![4, 3, 2]);
        let back = tape.swap_axes(s, 0, 2).unwrap();
        assert_eq!(tape.value(back).data, data);
        // spot value: [i,j,k] of original at [k,j,i] of swapped
        assert_eq!(tape.value(s).data[0], 0.0);
        assert_eq!(tape.value(s).data[1], 12.0); // [0,0,1] <- orig [1,0,0]
    }

    #[test]
    fn narrow_last_splits_and_scatters_gradient() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap().with_grad();
        let a = tape.leaf(t);
        let left = tape.narrow_last(a, 0, 2).unwrap();
        assert_eq!(tape.value(left).data, vec![1.0, 2.0, 5.0, 6.0]);
        let right = tape.narrow_last(a, 2, 2).unwrap();
        let l2 = tape.mul(right, right).unwrap();
        let loss = tape.sum_all(l2);
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        assert_eq!(g, &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0, 14.0, 16.0]);
    }

    #[test]
    fn mean_axis_pools_time() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = tape.mean_axis(a, 1).unwrap();
        assert_eq!(tape.value(m).shape, vec![1, 2]);
        assert_eq!(tape.value(m).data, vec![3.0, 4.0]);
    }

    #[test]
    fn determinism_same_inputs_same_outputs() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.7]).unwrap().with_grad(),
            );
            let s = tape.softmax_last(x);
            let l = tape.sum_all(s);
            tape.backward(l).unwrap();
            (tape.value(s).data.clone(), tape.grad(x).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
