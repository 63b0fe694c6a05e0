use rand::Rng;

use super::kernels::{self, NORM_FLOOR};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Define-by-run tape. Operations are appended in evaluation order, so the
/// recording order is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only. Every output has
    /// `requires_grad == false`, so nothing is retained for backward.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn is_recording(&self) -> bool {
        !self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && !self.no_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(Var, Var) -> Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_index_map(ta.shape(), &shape);
            let mb = kernels::broadcast_index_map(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(self.push(Tensor::from_parts(shape, data), &[a, b], op(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, &[x], op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), &[x], Op::Mean(x))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim(format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..t.rank()).collect::<Vec<_>>() {
            return Err(Error::dim(format!("invalid permutation {axes:?}")));
        }
        let (shape, data) = kernels::permute(t.data(), t.shape(), axes);
        Ok(self.push(Tensor::from_parts(shape, data), &[x], Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), xs, Op::Concat(xs.to_vec(), axis)))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) on axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = kernels::axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[off..off + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), &[x], Op::Narrow { x, axis, start }))
    }

    /// Gathers slices along the first axis.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || idx.is_empty() {
            return Err(Error::dim("index_select needs rank >= 1 and indices"));
        }
        let rows = t.shape()[0];
        let width = t.numel() / rows;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(format!("row {i} of {rows}")));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(Tensor::from_parts(shape, data), &[x], Op::IndexSelect(x, idx.to_vec())))
    }

    /// Gathers individual elements by flat index into a vector.
    pub fn take(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if flat.is_empty() || flat.iter().any(|&i| i >= t.numel()) {
            return Err(Error::dim("take index out of range"));
        }
        let data = flat.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::from_vec(data), &[x], Op::Take(x, flat.to_vec())))
    }

    /// `out[seg[k]] += x[k]` over a vector, producing `n_segments` sums.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || seg.len() != t.numel() || seg.iter().any(|&s| s >= n_segments) {
            return Err(Error::dim("segment_sum expects a vector and in-range segments"));
        }
        let mut out = vec![0.0; n_segments];
        for (&s, v) in seg.iter().zip(t.data()) {
            out[s] += v;
        }
        Ok(self.push(Tensor::from_vec(out), &[x], Op::SegmentSum(x, seg.to_vec())))
    }

    /// Matrix product over the last two axes. `b` may be a plain matrix
    /// shared across all leading axes of `a`, or carry the same leading
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::dim(format!(
                "inner dimensions differ: {sa:?} x {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim(format!("batch axes differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        if shared {
            mm(batch * m, k, n, ta.data(), false, tb.data(), trans_b, &mut out);
        } else {
            for p in 0..batch {
                mm(
                    m,
                    k,
                    n,
                    &ta.data()[p * m * k..(p + 1) * m * k],
                    false,
                    &tb.data()[p * k * n..(p + 1) * k * n],
                    trans_b,
                    &mut out[p * m * n..(p + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::MatMul { a, b, trans_b }))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::dim(format!("axis {axis} for shape {s:?}")));
        }
        Ok(())
    }

    fn check_mask(&self, x: Var, mask: Option<&[bool]>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.value(x).numel() => Err(Error::dim(format!(
                "mask of {} entries for shape {:?}",
                m.len(),
                self.shape(x)
            ))),
            _ => Ok(()),
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` where entries with `mask == false` are excluded
    /// (probability exactly zero). A slice with no unmasked entry is a
    /// contract error.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(x, axis)?;
        self.check_mask(x, mask)?;
        let t = self.value(x);
        let y = kernels::softmax_axis(t.data(), t.shape(), axis, mask, false)?;
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(out, &[x], Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_log_softmax(x, axis, None)
    }

    /// Log-softmax along `axis`; masked entries are excluded from the
    /// normalizer and their output is zero.
    pub fn masked_log_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(x, axis)?;
        self.check_mask(x, mask)?;
        let t = self.value(x);
        let y = kernels::softmax_axis(t.data(), t.shape(), axis, mask, true)?;
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        let mask = mask.map(<[bool]>::to_vec);
        Ok(self.push(out, &[x], Op::LogSoftmax { x, axis, mask }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if d < 2 {
            return Err(Error::dim("layer_norm needs a last axis of at least 2"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm gain/bias must match the last axis"));
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales every slice along the last axis to unit Euclidean norm (norms
    /// floored at `1e-12`).
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::dim("normalize of a scalar"))?;
        let rows = t.numel() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(nrm);
            out.extend(row.iter().map(|v| v / nrm));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, &[x], Op::Normalize { x, norms }))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`, so evaluation uses the identity. The mask
    /// comes from the caller's seeded generator.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || self.no_grad {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, &[x], Op::Dropout(x, mask))
    }

    /// Reverse pass from a one-element `loss`. Gradients are accumulated
    /// additively into every `requires_grad` leaf reachable from `loss`;
    /// leaves that are not reachable keep their previous gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((i, g));
            } else {
                self.backprop(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_updates {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                send(*a, kernels::reduce_to(g, val(*a).shape(), out_shape));
                send(*b, kernels::reduce_to(g, val(*b).shape(), out_shape));
            }
            Op::Sub(a, b) => {
                send(*a, kernels::reduce_to(g, val(*a).shape(), out_shape));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, kernels::reduce_to(&neg, val(*b).shape(), out_shape));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let ma = kernels::broadcast_index_map(ta.shape(), out_shape);
                let mb = kernels::broadcast_index_map(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = if is_div {
                        g.iter().zip(&mb).map(|(gv, &j)| gv / db[j]).collect()
                    } else {
                        g.iter().zip(&mb).map(|(gv, &j)| gv * db[j]).collect()
                    };
                    send(*a, kernels::reduce_to(&ga, ta.shape(), out_shape));
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = if is_div {
                        g.iter()
                            .zip(ma.iter().zip(&mb))
                            .map(|(gv, (&i, &j))| -gv * da[i] / (db[j] * db[j]))
                            .collect()
                    } else {
                        g.iter().zip(&ma).map(|(gv, &i)| gv * da[i]).collect()
                    };
                    send(*b, kernels::reduce_to(&gb, tb.shape(), out_shape));
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Exp(x) => send(*x, g.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect()),
            Op::Log(x) => send(*x, g.iter().zip(val(*x).data()).map(|(gv, xv)| gv / xv).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Clamp { x, lo, hi } => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(val(*x).shape(), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::Permute(x, axes) => {
                let inv = kernels::inverse_permutation(axes);
                let (_, gx) = kernels::permute(g, out_shape, &inv);
                send(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + len * inner]);
                        }
                        send(v, gx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(val(*x).shape(), *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::IndexSelect(x, idx) => {
                let tx = val(*x);
                let width = tx.numel() / tx.shape()[0];
                let mut gx = vec![0.0; tx.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for (d, s) in gx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *d += s;
                    }
                }
                send(*x, gx);
            }
            Op::Take(x, flat) => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (&i, gv) in flat.iter().zip(g) {
                    gx[i] += gv;
                }
                send(*x, gx);
            }
            Op::SegmentSum(x, seg) => send(*x, seg.iter().map(|&s| g[s]).collect()),
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = out_shape[out_shape.len() - 1];
                let shared = tb.rank() == 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; ta.numel()];
                    if shared {
                        mm(batch * m, n, k, g, false, tb.data(), !trans_b, &mut ga);
                    } else {
                        for p in 0..batch {
                            mm(
                                m,
                                n,
                                k,
                                &g[p * m * n..(p + 1) * m * n],
                                false,
                                &tb.data()[p * k * n..(p + 1) * k * n],
                                !trans_b,
                                &mut ga[p * m * k..(p + 1) * m * k],
                            );
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; tb.numel()];
                    let rows = if shared { batch * m } else { m };
                    let reps = if shared { 1 } else { batch };
                    for p in 0..reps {
                        let ap = &ta.data()[p * rows * k..(p + 1) * rows * k];
                        let gp = &g[p * rows * n..(p + 1) * rows * n];
                        let bp = &mut gb[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            mm(n, rows, k, gp, true, ap, false, bp);
                        } else {
                            mm(k, rows, n, ap, true, gp, false, bp);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax { x, axis, mask } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                let keep = |p: usize| mask.as_ref().is_none_or(|m| m[p]);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let total: f64 = (0..len)
                            .map(|j| base + j * inner)
                            .filter(|&p| keep(p))
                            .map(|p| g[p])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            if keep(p) {
                                gx[p] = g[p] - y[p].exp() * total;
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = xhat.len() / d;
                let gn = val(*gain).data();
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            gx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    send(*x, gx);
                }
                if self.nodes[gain.0].requires_grad {
                    let mut gg = vec![0.0; d];
                    for (p, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        gg[p % d] += gv * h;
                    }
                    send(*gain, gg);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut gb = vec![0.0; d];
                    for (p, gv) in g.iter().enumerate() {
                        gb[p % d] += gv;
                    }
                    send(*bias, gb);
                }
            }
            Op::Normalize { x, norms } => {
                let y = node.value.data();
                let d = *out_shape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let raw = val(*x).data()[r * d..(r + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if raw < NORM_FLOOR {
                        for j in 0..d {
                            gx[r * d + j] = gr[j] / nrm;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Dropout(x, mask) => send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
        }
    }
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`; a `true`
/// flag means the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn mm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    kernels::gemm_acc(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let x = g.constant(t(&[2, 2], &[0.5, -1.0, 3.0, 7.0]));
        let ones = g.constant(Tensor::ones(vec![2, 2]));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let v = g.constant(Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        let m = g.mean(v);
        assert_eq!(g.value(m).item(), 4.0);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        let z = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(z), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);

        let bad = g.constant(Tensor::zeros(vec![3, 1]));
        assert!(matches!(g.matmul(r, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        for c in [-30.0, 0.0, 2.5, 700.0] {
            let x = g.constant(Tensor::from_vec(vec![c; 3]));
            let y = g.softmax(x, 0).unwrap();
            for v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let x = g.constant(Tensor::from_vec(vec![0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

        let x = g.constant(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
        let xs = g.add_scalar(x, 17.0);
        let a = g.softmax(x, 0).unwrap();
        let b = g.softmax(xs, 0).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
    }

    #[test]
    fn masked_softmax_rejects_empty_slice() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]));
        let mask = [true, false, false, false];
        assert!(matches!(g.masked_softmax(x, 1, Some(&mask)), Err(Error::Contract(_))));
        let mask = [true, false, false, true];
        let y = g.masked_softmax(x, 1, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(vec![2]));
        let bias = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-30).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);

        let gain3 = g.constant(Tensor::ones(vec![3]));
        let bias3 = g.constant(Tensor::zeros(vec![3]));
        let c = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(c, gain3, bias3, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gw = g.constant(Tensor::from_vec(vec![2.0, -0.5, 3.0]));
        let bw = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 4.0, -3.0, 0.5, 0.0]));
        let plain = g.layer_norm(x, gain3, bias3, 1e-5).unwrap();
        let affine = g.layer_norm(x, gw, bw, 1e-5).unwrap();
        for (i, (p, a)) in g.value(plain).data().iter().zip(g.value(affine).data()).enumerate() {
            let j = i % 3;
            let want = [2.0, -0.5, 3.0][j] * p + [0.1, 0.2, 0.3][j];
            assert!((a - want).abs() < 1e-14);
        }
        let one = g.constant(Tensor::zeros(vec![2, 1]));
        let g1 = g.constant(Tensor::ones(vec![1]));
        assert!(g.layer_norm(one, g1, g1, 1e-5).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.5, -2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_untouched() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let y = g.param(Tensor::from_vec(vec![1.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + x): df/dx = 2x + 1, via two paths through x.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.5, -0.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 0.0]);
    }

    #[test]
    fn inference_graph_keeps_no_grad() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let l = g.sum(x);
        assert!(!g.requires_grad(l));
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
    }
}
