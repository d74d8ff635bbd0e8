//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into the leaves that were registered with
//! `requires_grad`. Leaf gradients add up across calls until
//! [`Tape::zero_grad`].
//!
//! The tape doubles as the allocation arena: it tracks the live bytes of all
//! values, saved intermediates and gradients it owns, and the peak of that
//! number, along with a count of matmul FLOPs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone)]
struct MatMulPlan {
    // (a offset, b offset) per output batch entry, in elements
    pairs: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        rows_in: usize,
    },
    PrependRow {
        row: Var,
        x: Var,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherBias {
        table: Var,
        index: Vec<usize>,
        heads: usize,
    },
}

impl<T> Op<T> {
    fn aux_bytes(&self, elem: usize) -> usize {
        let idx = core::mem::size_of::<usize>();
        match self {
            Op::LayerNorm { rstd, .. } => rstd.len() * elem,
            Op::CrossEntropy { targets, probs, .. } => probs.len() * elem + targets.len() * idx,
            Op::GatherRows { index, .. } => index.len() * idx,
            Op::Embedding { ids, .. } => ids.len() * idx,
            Op::GatherBias { index, .. } => index.len() * idx,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    stats: TapeStats,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into a new buffer with axes reordered by `axes`.
fn permute_copy<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.extend_from_slice(src);
        return (out, out_shape);
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Linear offset into a (right-aligned, broadcast) batch shape for the output batch index `flat`.
fn batch_offset(flat: usize, out_batch: &[usize], own: &[usize]) -> usize {
    let own_strides = strides(own);
    let lead = out_batch.len() - own.len();
    let mut rem = flat;
    let mut off = 0;
    for i in (0..out_batch.len()).rev() {
        let coord = rem % out_batch[i];
        rem /= out_batch[i];
        if i >= lead {
            let j = i - lead;
            if own[j] != 1 {
                off += coord * own_strides[j];
            }
        }
    }
    off
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            stats: TapeStats::default(),
        }
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn alloc(&mut self, bytes: usize) {
        self.stats.live_bytes += bytes;
        self.stats.peak_bytes = self.stats.peak_bytes.max(self.stats.live_bytes);
    }

    fn free(&mut self, bytes: usize) {
        self.stats.live_bytes -= bytes;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.alloc(value.bytes() + op.aux_bytes(T::BYTES));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Gradients are kept only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        let mut freed = 0;
        for g in self.leaf_grads.iter_mut() {
            if let Some(buf) = g.take() {
                freed += buf.len() * T::BYTES;
            }
        }
        self.free(freed);
    }

    // ---- operations ------------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n]` with broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (plan, out_shape) = if sb.len() == 2 {
            // fold the batch of `a` into its rows
            let m = numel(&sa[..sa.len() - 1]);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            (
                MatMulPlan {
                    pairs: vec![(0, 0)],
                    m,
                    k,
                    n,
                },
                out_shape,
            )
        } else {
            let m = sa[sa.len() - 2];
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            let out_batch = broadcast_batch(ba, bb).ok_or_else(|| mismatch("matmul", &sa, &sb))?;
            let pairs = (0..numel(&out_batch))
                .map(|i| {
                    (
                        batch_offset(i, &out_batch, ba) * m * k,
                        batch_offset(i, &out_batch, bb) * k * n,
                    )
                })
                .collect();
            let mut out_shape = out_batch;
            out_shape.extend_from_slice(&[m, n]);
            (MatMulPlan { pairs, m, k, n }, out_shape)
        };
        let MatMulPlan { m, .. } = plan;
        let mut out = vec![T::ZERO; numel(&out_shape)];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                gemm_nn(
                    &av[oa..oa + m * k],
                    &bv[ob..ob + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.stats.forward_flops += 2 * (plan.pairs.len() * m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b, plan }, ng))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !is_suffix(&sa, &sb) {
            return Err(mismatch("add", &sa, &sb));
        }
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Add { a, b }, ng))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !is_suffix(&sa, &sb) {
            return Err(mismatch("mul", &sa, &sb));
        }
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&x| x * c).collect()).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::ONE / T::from_usize(n))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| mismatch("softmax", &shape, &[1]))?;
        if d == 0 {
            return Err(mismatch("softmax", &shape, &[1]));
        }
        let x = self.value(a).data();
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if !eps.is_finite() || eps <= T::ZERO {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let mut out = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        let inv_d = T::ONE / T::from_usize(d);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
            ng,
        ))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&x| half * x * (T::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let out = Tensor::new(v.shape(), out).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Rows are all leading axes.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let n = *shape.last().unwrap_or(&0);
        let x = self.value(logits).data();
        let rows = x.len().checked_div(n).unwrap_or(0);
        if rows != targets.len() || rows == 0 {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some((index, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= n) {
            return Err(Error::TargetOutOfRange {
                index,
                target,
                classes: n,
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "cross_entropy",
            });
        }
        let mut probs = x.to_vec();
        // Summing deviations from the first row keeps the mean of identical rows exact.
        let mut base = None;
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(n).enumerate() {
            let max = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            for v in row.iter() {
                z += (*v - max).exp();
            }
            let lse = max + z.ln();
            let l = (lse - x[r * n + targets[r]]).to_f64();
            let b = *base.get_or_insert(l);
            total += l - b;
            for v in row.iter_mut() {
                *v = (*v - max).exp() / z;
            }
        }
        let loss = T::from_f64(base.unwrap_or(0.0) + total / rows as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape { a }, ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || core::mem::replace(&mut seen[x], true))
        {
            return Err(mismatch("permute", &shape, axes));
        }
        let (out, out_shape) = permute_copy(self.value(a).data(), &shape, axes);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Selects rows of `x: [B, T, d]` per sample: `index` holds `B * M` entries in `0..T`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] == 0 || !index.len().is_multiple_of(shape[0]) {
            return Err(mismatch("gather_rows", &shape, &[index.len()]));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let m = index.len() / b;
        if let Some(&bad) = index.iter().find(|&&i| i >= t) {
            return Err(Error::InvalidContext {
                index: bad,
                tokens: t,
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * m * d);
        for s in 0..b {
            for &i in &index[s * m..(s + 1) * m] {
                out.extend_from_slice(&xv[(s * t + i) * d..(s * t + i + 1) * d]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[b, m, d], out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                rows_in: t,
            },
            ng,
        ))
    }

    /// `[d]` and `[B, N, d]` to `[B, N + 1, d]` with the row at position 0 of every sample.
    pub fn prepend_row(&mut self, row: Var, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(row).to_vec();
        if sx.len() != 3 || sr != [sx[2]] {
            return Err(mismatch("prepend_row", &sr, &sx));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let rv = self.value(row).data();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for s in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[s * n * d..(s + 1) * n * d]);
        }
        let ng = self.ng(row) || self.ng(x);
        Ok(self.push(
            Tensor::new(&[b, n + 1, d], out)?,
            Op::PrependRow { row, x },
            ng,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch("narrow", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Narrow { a, axis, start },
            ng,
        ))
    }

    /// Row lookup in `table: [n, d]`; the result has shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(lead) != ids.len() {
            return Err(mismatch("embedding", &st, lead));
        }
        let (n, d) = (st[0], st[1]);
        if let Some(&id) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::PositionOutOfRange { id, positions: n });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Builds `[B, h, T, S]` from `table: [h, R]` where `index: [B, T, S]` picks a column.
    pub fn gather_bias(&mut self, table: Var, index: &[usize], dims: [usize; 3]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [b, t, s] = dims;
        if st.len() != 2 || index.len() != b * t * s {
            return Err(mismatch("gather_bias", &st, &dims));
        }
        let (h, r) = (st[0], st[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_bias", &st, &[bad]));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(b * h * t * s);
        for bi in 0..b {
            let idx = &index[bi * t * s..(bi + 1) * t * s];
            for hh in 0..h {
                let row = &tv[hh * r..(hh + 1) * r];
                out.extend(idx.iter().map(|&i| row[i]));
            }
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&[b, h, t, s], out)?,
            Op::GatherBias {
                table,
                index: index.to_vec(),
                heads: h,
            },
            ng,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 || !ls.iter().all(|&e| e == 1) {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        self.alloc(T::BYTES);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let gbytes = g.len() * T::BYTES;
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                        self.free(gbytes);
                    }
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let contributions = self.node_backward(i, &g);
            self.free(gbytes);
            drop(g);
            for (parent, cg) in contributions {
                if !self.ng(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&cg) {
                            *a += *v;
                        }
                    }
                    slot @ None => {
                        let bytes = cg.len() * T::BYTES;
                        *slot = Some(cg);
                        self.alloc(bytes);
                    }
                }
            }
        }
        Ok(())
    }

    fn node_backward(&mut self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (a, b) = (*a, *b);
                let MatMulPlan { m, k, n, .. } = *plan;
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let mut flops = 0u64;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::ZERO; av.len()];
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    flops += 2 * (plan.pairs.len() * m * k * n) as u64;
                    out.push((a, ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::ZERO; bv.len()];
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_tn(
                            &av[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    flops += 2 * (plan.pairs.len() * m * k * n) as u64;
                    out.push((b, gb));
                }
                self.stats.backward_flops += flops;
            }
            Op::Add { a, b } => {
                let inner = self.nodes[b.0].value.len().max(1);
                let mut gb = vec![T::ZERO; inner];
                for ch in g.chunks(inner) {
                    for (x, &y) in gb.iter_mut().zip(ch) {
                        *x += y;
                    }
                }
                out.push((*a, g.to_vec()));
                out.push((*b, gb));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let inner = bv.len().max(1);
                let mut ga = vec![T::ZERO; av.len()];
                let mut gb = vec![T::ZERO; inner];
                for (c, (gc, ac)) in g.chunks(inner).zip(av.chunks(inner)).enumerate() {
                    for j in 0..gc.len() {
                        ga[c * inner + j] = gc[j] * bv[j];
                        gb[j] += gc[j] * ac[j];
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale { a, c } => out.push((*a, g.iter().map(|&v| v * *c).collect())),
            Op::Sum { a } => out.push((*a, vec![g[0]; self.nodes[a.0].value.len()])),
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut ga = vec![T::ZERO; y.len()];
                for ((yr, gr), out_r) in y
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                {
                    let dotp: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out_r[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                out.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let d = gv.len();
                let inv_d = T::ONE / T::from_usize(d);
                let mut gx = vec![T::ZERO; xv.len()];
                let mut ggain = vec![T::ZERO; d];
                let mut gbias = vec![T::ZERO; d];
                let mut xhat = vec![T::ZERO; d];
                let mut dxhat = vec![T::ZERO; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rs;
                        dxhat[j] = gr[j] * gv[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        gx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                out.push((*x, gx));
                out.push((*gain, ggain));
                out.push((*bias, gbias));
            }
            Op::Gelu { a } => {
                let xv = self.nodes[a.0].value.data();
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::from_f64(0.398_942_280_401_432_7);
                let ga = xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let n = probs.len() / rows;
                let scale = g[0] / T::from_usize(rows);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] -= scale;
                }
                out.push((*logits, gl));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (ga, _) = permute_copy(g, node.value.shape(), &inv);
                out.push((*a, ga));
            }
            Op::GatherRows { x, index, rows_in } => {
                let shape = node.value.shape();
                let (b, m, d) = (shape[0], shape[1], shape[2]);
                let mut gx = vec![T::ZERO; b * rows_in * d];
                for s in 0..b {
                    for (j, &ti) in index[s * m..(s + 1) * m].iter().enumerate() {
                        let src = &g[(s * m + j) * d..(s * m + j + 1) * d];
                        let dst = &mut gx[(s * rows_in + ti) * d..(s * rows_in + ti + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::PrependRow { row, x } => {
                let shape = node.value.shape();
                let (b, n1, d) = (shape[0], shape[1], shape[2]);
                let mut gr = vec![T::ZERO; d];
                let mut gx = Vec::with_capacity(b * (n1 - 1) * d);
                for s in 0..b {
                    let blk = &g[s * n1 * d..(s + 1) * n1 * d];
                    for (o, &v) in gr.iter_mut().zip(&blk[..d]) {
                        *o += v;
                    }
                    gx.extend_from_slice(&blk[d..]);
                }
                out.push((*row, gr));
                out.push((*x, gx));
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape();
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut ga = vec![T::ZERO; numel(in_shape)];
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    ga[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, ga));
            }
            Op::Embedding { table, ids } => {
                let st = self.nodes[table.0].value.shape();
                let d = st[1];
                let mut gt = vec![T::ZERO; st[0] * d];
                for (j, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[j * d + c];
                    }
                }
                out.push((*table, gt));
            }
            Op::GatherBias {
                table,
                index,
                heads,
            } => {
                let r = self.nodes[table.0].value.shape()[1];
                let shape = node.value.shape();
                let (b, t, s) = (shape[0], shape[2], shape[3]);
                let mut gt = vec![T::ZERO; heads * r];
                for bi in 0..b {
                    let idx = &index[bi * t * s..(bi + 1) * t * s];
                    for hh in 0..*heads {
                        let gblk = &g[(bi * heads + hh) * t * s..(bi * heads + hh + 1) * t * s];
                        for (&col, &v) in idx.iter().zip(gblk) {
                            gt[hh * r + col] += v;
                        }
                    }
                }
                out.push((*table, gt));
            }
        }
        out
    }
}

/// Max-subtracted softmax of one slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tp.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tp.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).shape(), &[1, 1]);
        assert_eq!(tp.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        match tp.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts() {
        // [2, 1, 2, 2] x [3, 2, 2] -> [2, 3, 2, 2]
        let mut tp = Tape::<f64>::new();
        let a_data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let b_data: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect();
        let a = tp.constant(t(&[2, 1, 2, 2], &a_data));
        let b = tp.constant(t(&[3, 2, 2], &b_data));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.shape(c), &[2, 3, 2, 2]);
        let cv = tp.value(c).data().to_vec();
        for i in 0..2 {
            for j in 0..3 {
                for r in 0..2 {
                    for col in 0..2 {
                        let want: f64 = (0..2)
                            .map(|p| a_data[i * 4 + r * 2 + p] * b_data[j * 4 + p * 2 + col])
                            .sum();
                        assert_eq!(cv[((i * 3 + j) * 2 + r) * 2 + col], want);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_softmax() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[4]));
        let y = tp.softmax_lastdim(x).unwrap();
        assert_eq!(tp.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
        let y = tp.softmax_lastdim(x).unwrap();
        assert_eq!(tp.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            tp.softmax_lastdim(x),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tp.softmax_lastdim(x).unwrap();
        let s: f64 = tp.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let g = tp.constant(Tensor::full(&[3], 1.0));
        let b = tp.constant(Tensor::zeros(&[3]));
        let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tp.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[2], &[1.0, 3.0]));
        let g = tp.constant(Tensor::full(&[2], 1.0));
        let b = tp.constant(Tensor::zeros(&[2]));
        let y = tp.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tp.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[2, 3]));
        let g = tp.constant(Tensor::zeros(&[4]));
        let b = tp.constant(Tensor::zeros(&[4]));
        assert!(tp.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[3], &[0.0, 10.0, -10.0]));
        let y = tp.gelu(x);
        let v = tp.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(Tensor::zeros(&[5, 64]));
        let l = tp.cross_entropy_mean(x, &[0, 7, 63, 2, 2]).unwrap();
        assert_eq!(tp.value(l).item(), 64f32.ln());
        assert!((tp.value(l).item() as f64 - 4.158883).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident() {
        let mut tp = Tape::<f64>::new();
        let mut data = vec![0.0; 8];
        data[3] = 30.0;
        let x = tp.constant(t(&[1, 8], &data));
        let l = tp.cross_entropy_mean(x, &[3]).unwrap();
        assert!(tp.value(l).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_case() {
        let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let targets = [1, 0];
        let row = |r: usize| {
            let z: f64 = logits[r * 3..r * 3 + 3].iter().map(|v: &f64| v.exp()).sum();
            z.ln() - logits[r * 3 + targets[r]]
        };
        let want = (row(0) + row(1)) / 2.0;
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[2, 3], &logits));
        let l = tp.cross_entropy_mean(x, &targets).unwrap();
        assert!((tp.value(l).item() - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_bad_target() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            tp.cross_entropy_mean(x, &[0, 3]),
            Err(Error::TargetOutOfRange {
                index: 1,
                target: 3,
                classes: 3
            })
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::zeros(&[2, 3, 4]), true);
        let s = tp.sum(x);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[1.0; 24]);
    }

    #[test]
    fn backward_of_square_and_accumulation() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[2.0, 4.0]);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[4.0, 8.0]);
        tp.zero_grad();
        assert!(tp.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::zeros(&[2]), true);
        assert_eq!(tp.backward(x), Err(Error::NonScalarLoss(vec![2])));
    }

    #[test]
    fn permute_round_trip() {
        let mut tp = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tp.constant(t(&[2, 3, 4], &data));
        let y = tp.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tp.shape(y), &[4, 2, 3]);
        // y[c, a, b] == x[a, b, c]
        assert_eq!(
            tp.value(y).data()[(3 * 2 + 1) * 3 + 2],
            data[(3 + 2) * 4 + 3]
        );
        let z = tp.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tp.value(z).data(), &data[..]);
    }

    #[test]
    fn memory_accounting_returns_to_values_after_backward() {
        let mut tp = Tape::<f32>::new();
        let x = tp.leaf(Tensor::zeros(&[4, 4]), true);
        let w = tp.leaf(Tensor::zeros(&[4, 4]), true);
        let y = tp.matmul(x, w).unwrap();
        let s = tp.sum(y);
        let before = tp.stats().live_bytes;
        tp.backward(s).unwrap();
        // two leaf grads of 16 floats each remain
        assert_eq!(tp.stats().live_bytes, before + 2 * 16 * 4);
        assert!(tp.stats().peak_bytes >= tp.stats().live_bytes);
        assert_eq!(tp.stats().forward_flops, 2 * 64);
        assert_eq!(tp.stats().backward_flops, 4 * 64);
    }
}
