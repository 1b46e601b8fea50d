//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed
//! when the op is added, and [`Graph::backward`] walks the tape in reverse.
//! Shape errors inside the graph are programming errors and panic; callers
//! validate user-facing inputs before building the tape.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BcKind {
    Add,
    Mul,
}

/// `x` viewed as `[outer, mid, inner]`; the broadcast operand holds `mid`
/// values (or `outer * mid` when `per_outer`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub outer: usize,
    pub mid: usize,
    pub inner: usize,
    pub per_outer: bool,
}

impl Broadcast {
    /// Per-channel operand for a `[outer, channels, inner]` view.
    pub fn channels(outer: usize, channels: usize, inner: usize) -> Self {
        Self { outer, mid: channels, inner, per_outer: false }
    }

    /// Scalar operand broadcast over `numel` elements.
    pub fn scalar(numel: usize) -> Self {
        Self { outer: 1, mid: 1, inner: numel, per_outer: false }
    }

    fn operand_len(&self) -> usize {
        if self.per_outer {
            self.outer * self.mid
        } else {
            self.mid
        }
    }

    #[inline]
    fn operand_index(&self, o: usize, m: usize) -> usize {
        if self.per_outer {
            o * self.mid + m
        } else {
            m
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

impl MatMulDims {
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

enum Op<T> {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Broadcast { x: Var, b: Var, kind: BcKind, dims: Broadcast },
    MatMul { a: Var, b: Var, dims: MatMulDims },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Narrow { x: Var, outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    Concat { xs: Vec<Var>, outer: usize, inner: usize, dims: Vec<usize> },
    Softmax(Var),
    Silu(Var),
    Relu(Var),
    Clamp { x: Var, lo: T, hi: T },
    Normalize { x: Var, chunk: usize, inv_std: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, out_channels: usize },
    Upsample2x { x: Var, planes: usize, h: usize, w: usize },
    Sum(Var),
    Mean(Var),
    SumLeading { x: Var, count: usize },
    MaxAxis0 { x: Var, cols: usize, argmax: Vec<usize> },
    MaxAll { x: Var, argmax: usize },
    Gather { table: Var, ids: Vec<usize>, width: usize },
    SelectLast { x: Var, idx: Vec<usize>, last: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of a differentiable computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    fn broadcast(&mut self, x: Var, b: Var, dims: Broadcast, kind: BcKind) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(xv.len(), dims.outer * dims.mid * dims.inner, "broadcast view of {:?} as {dims:?}", xv.shape());
        assert_eq!(bv.len(), dims.operand_len(), "broadcast operand {:?} for {dims:?}", bv.shape());
        let mut out = xv.clone();
        let (xd, bd) = (out.data_mut(), bv.data());
        for o in 0..dims.outer {
            for m in 0..dims.mid {
                let bval = bd[dims.operand_index(o, m)];
                let row = &mut xd[(o * dims.mid + m) * dims.inner..(o * dims.mid + m + 1) * dims.inner];
                match kind {
                    BcKind::Add => row.iter_mut().for_each(|v| *v += bval),
                    BcKind::Mul => row.iter_mut().for_each(|v| *v *= bval),
                }
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::Broadcast { x, b, kind, dims }, ng)
    }

    pub fn broadcast_add(&mut self, x: Var, b: Var, dims: Broadcast) -> Var {
        self.broadcast(x, b, dims, BcKind::Add)
    }

    pub fn broadcast_mul(&mut self, x: Var, b: Var, dims: Broadcast) -> Var {
        self.broadcast(x, b, dims, BcKind::Mul)
    }

    /// Row-vector bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x);
        let last = *shape.last().expect("add_bias on scalar");
        let rows = numel(shape) / last;
        self.broadcast_add(x, bias, Broadcast { outer: rows, mid: last, inner: 1, per_outer: false })
    }

    fn matmul_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> (MatMulDims, Vec<usize>) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == sb.len() && (sa.len() == 2 || sa.len() == 3), "matmul ranks {sa:?} {sb:?}");
        let batched = sa.len() == 3;
        let (batch, ra, ca, rb, cb) = if batched {
            assert_eq!(sa[0], sb[0], "bmm batch {sa:?} {sb:?}");
            (sa[0], sa[1], sa[2], sb[1], sb[2])
        } else {
            (1, sa[0], sa[1], sb[0], sb[1])
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        (MatMulDims { batch, m, k, n, ta, tb }, shape)
    }

    /// (Batched) matrix product with optional transposes of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (d, shape) = self.matmul_dims(a, b, ta, tb);
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..d.batch {
                T::gemm(
                    d.m,
                    d.k,
                    d.n,
                    &av[i * d.m * d.k..(i + 1) * d.m * d.k],
                    d.a_strides(),
                    &bv[i * d.k * d.n..(i + 1) * d.k * d.n],
                    d.b_strides(),
                    &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                    (d.n as isize, 1),
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out).unwrap(), Op::MatMul { a, b, dims: d }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self.value(x).permute(perm);
        let ng = self.ng(x);
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 2, "transpose expects a matrix");
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = Self::axis_view(&shape, axis);
        assert!(start + len <= dim, "narrow {start}+{len} exceeds {dim} on axis {axis}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(&out_shape, out).unwrap(), Op::Narrow { x, outer, dim, inner, start, len }, ng)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let (outer, _, inner) = Self::axis_view(&first, axis);
        let mut dims = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            assert!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shapes {first:?} vs {s:?} on axis {axis}"
            );
            dims.push(s[axis]);
        }
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &d) in xs.iter().zip(&dims) {
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&out_shape, out).unwrap(), Op::Concat { xs: xs.to_vec(), outer, inner, dims }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("softmax on scalar");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Clamp into `[lo, hi]`; the gradient passes where the input is inside the closed range.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    /// Zero-mean, unit-variance normalization over consecutive chunks of `chunk` elements.
    pub fn normalize(&mut self, x: Var, chunk: usize, eps: T) -> Var {
        let xv = self.value(x);
        assert!(chunk > 0 && xv.len().is_multiple_of(chunk), "normalize chunk {chunk} for {:?}", xv.shape());
        let n = T::from_usize(chunk).unwrap();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / chunk);
        for c in out.data_mut().chunks_mut(chunk) {
            let mean = c.iter().copied().sum::<T>() / n;
            let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in c.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::Normalize { x, chunk, inv_std }, ng)
    }

    /// 2-d convolution. `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d ranks {xs:?} {ws:?}");
        assert!(ws[1] == xs[1] && ws[2] == ws[3], "conv2d weight {ws:?} for input {xs:?}");
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let (batch, oc) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); batch * oc * ho * wo];
        let mut cols = vec![T::zero(); rows * cols_n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let img = geom.channels * geom.height * geom.width;
            for i in 0..batch {
                im2col(&geom, &xv[i * img..(i + 1) * img], &mut cols);
                let dst = &mut out[i * oc * cols_n..(i + 1) * oc * cols_n];
                T::gemm(oc, rows, cols_n, wv, (rows as isize, 1), &cols, (cols_n as isize, 1), dst, (cols_n as isize, 1), false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), oc, "conv2d bias");
                for i in 0..batch {
                    for (o, &bias) in bv.iter().enumerate() {
                        let base = (i * oc + o) * cols_n;
                        out[base..base + cols_n].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[batch, oc, ho, wo], out).unwrap();
        self.push(value, Op::Conv2d { x, w, b, geom, batch, out_channels: oc }, ng)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects [B, C, H, W]");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out).unwrap();
        self.push(value, Op::Upsample2x { x, planes, h, w }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Sum over the leading axis: `[count, ...] -> [...]`.
    pub fn sum_leading(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(!s.is_empty(), "sum_leading on scalar");
        let count = s[0];
        let rest = numel(&s[1..]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rest];
        for c in 0..count {
            for (o, &v) in out.iter_mut().zip(&src[c * rest..(c + 1) * rest]) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&s[1..], out).unwrap(), Op::SumLeading { x, count }, ng)
    }

    /// Column maxima of a matrix: `[r, c] -> [c]`. Ties resolve to the first row.
    pub fn max_axis0(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "max_axis0 expects a matrix");
        let (rows, cols) = (s[0], s[1]);
        assert!(rows > 0, "max over empty axis");
        let src = self.value(x).data();
        let mut out = vec![T::neg_infinity(); cols];
        let mut argmax = vec![0usize; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = src[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[cols], out).unwrap(), Op::MaxAxis0 { x, cols, argmax }, ng)
    }

    /// Maximum over all elements. Ties resolve to the first occurrence.
    pub fn max_all(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        assert!(!src.is_empty(), "max over empty tensor");
        let mut best = 0;
        for (i, &v) in src.iter().enumerate() {
            if v > src[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(src[best]);
        let ng = self.ng(x);
        self.push(value, Op::MaxAll { x, argmax: best }, ng)
    }

    /// Row lookup: `table: [V, d]`, returns `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2, "gather_rows expects a matrix");
        let width = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            assert!(i < s[0], "row {i} out of range for {s:?}");
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let ng = self.ng(table);
        let value = Tensor::new(&[ids.len(), width], out).unwrap();
        self.push(value, Op::Gather { table, ids: ids.to_vec(), width }, ng)
    }

    /// Pick entries of the last axis: `[..., c] -> [..., idx.len()]`.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        let last = *s.last().expect("select_last on scalar");
        assert!(idx.iter().all(|&i| i < last), "select_last index out of range {idx:?} for {s:?}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() / last.max(1) * idx.len());
        for row in src.chunks(last) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = idx.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&out_shape, out).unwrap(), Op::SelectLast { x, idx: idx.to_vec(), last }, ng)
    }

    // Composite helpers.

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// `x @ w + b` over the last axis of a matrix.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar {:?}", self.shape(loss));
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let acc = |v: Var, grads: &mut [Option<Tensor<T>>], f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(*a, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                acc(*b, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                acc(*b, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, grads, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * o;
                    }
                });
                acc(*b, grads, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * o;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(v, &y)| *v += y * *c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, grads, &mut |d| d.iter_mut().zip(gd).for_each(|(v, &y)| *v += y));
            }
            Op::Broadcast { x, b, kind, dims } => {
                let (xv, bv) = (self.value(*x).data(), self.value(*b).data());
                acc(*x, grads, &mut |d| match kind {
                    BcKind::Add => d.iter_mut().zip(gd).for_each(|(v, &y)| *v += y),
                    BcKind::Mul => {
                        for o in 0..dims.outer {
                            for m in 0..dims.mid {
                                let bval = bv[dims.operand_index(o, m)];
                                let base = (o * dims.mid + m) * dims.inner;
                                for i in base..base + dims.inner {
                                    d[i] += gd[i] * bval;
                                }
                            }
                        }
                    }
                });
                acc(*b, grads, &mut |d| {
                    for o in 0..dims.outer {
                        for m in 0..dims.mid {
                            let base = (o * dims.mid + m) * dims.inner;
                            let s: T = match kind {
                                BcKind::Add => gd[base..base + dims.inner].iter().copied().sum(),
                                BcKind::Mul => gd[base..base + dims.inner]
                                    .iter()
                                    .zip(&xv[base..base + dims.inner])
                                    .map(|(&y, &v)| y * v)
                                    .sum(),
                            };
                            d[dims.operand_index(o, m)] += s;
                        }
                    }
                });
            }
            Op::MatMul { a, b, dims } => {
                let d = *dims;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb) = (d.a_strides(), d.b_strides());
                let g_str = (d.n as isize, 1);
                let gt_str = (1, d.n as isize);
                let (asz, bsz, gsz) = (d.m * d.k, d.k * d.n, d.m * d.n);
                acc(*a, grads, &mut |da| {
                    for i in 0..d.batch {
                        let gi = &gd[i * gsz..(i + 1) * gsz];
                        let bi = &bv[i * bsz..(i + 1) * bsz];
                        let dai = &mut da[i * asz..(i + 1) * asz];
                        if d.ta {
                            // dA[k, m] = op(B)[k, n] . G^T[n, m]
                            T::gemm(d.k, d.n, d.m, bi, sb, gi, gt_str, dai, (d.m as isize, 1), true);
                        } else {
                            // dA[m, k] = G[m, n] . op(B)^T[n, k]
                            T::gemm(d.m, d.n, d.k, gi, g_str, bi, (sb.1, sb.0), dai, (d.k as isize, 1), true);
                        }
                    }
                });
                acc(*b, grads, &mut |db| {
                    for i in 0..d.batch {
                        let gi = &gd[i * gsz..(i + 1) * gsz];
                        let ai = &av[i * asz..(i + 1) * asz];
                        let dbi = &mut db[i * bsz..(i + 1) * bsz];
                        if d.tb {
                            // dB[n, k] = G^T[n, m] . op(A)[m, k]
                            T::gemm(d.n, d.m, d.k, gi, gt_str, ai, sa, dbi, (d.k as isize, 1), true);
                        } else {
                            // dB[k, n] = op(A)^T[k, m] . G[m, n]
                            T::gemm(d.k, d.m, d.n, ai, (sa.1, sa.0), gi, g_str, dbi, (d.n as isize, 1), true);
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = g.permute(&inv);
                acc(*x, grads, &mut |d| d.iter_mut().zip(back.data()).for_each(|(v, &y)| *v += y));
            }
            Op::Narrow { x, outer, dim, inner, start, len } => {
                acc(*x, grads, &mut |d| {
                    for o in 0..*outer {
                        let dst = &mut d[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(v, &y)| *v += y);
                    }
                });
            }
            Op::Concat { xs, outer, inner, dims } => {
                let total: usize = dims.iter().sum();
                let mut offset = 0;
                for (&v, &dlen) in xs.iter().zip(dims) {
                    acc(v, grads, &mut |d| {
                        for o in 0..*outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + dlen) * inner];
                            let dst = &mut d[o * dlen * inner..(o + 1) * dlen * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &y)| *a += y);
                        }
                    });
                    offset += dlen;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                acc(*x, grads, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(gd.chunks(last)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |d| {
                    for ((dv, &v), &gv) in d.iter_mut().zip(xv).zip(gd) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *dv += gv * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |d| {
                    for ((dv, &v), &gv) in d.iter_mut().zip(xv).zip(gd) {
                        if v > T::zero() {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |d| {
                    for ((dv, &v), &gv) in d.iter_mut().zip(xv).zip(gd) {
                        if v >= *lo && v <= *hi {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Normalize { x, chunk, inv_std } => {
                let y = node.value.data();
                let n = T::from_usize(*chunk).unwrap();
                acc(*x, grads, &mut |d| {
                    for (((dc, yc), gc), &is) in d.chunks_mut(*chunk).zip(y.chunks(*chunk)).zip(gd.chunks(*chunk)).zip(inv_std) {
                        let gm = gc.iter().copied().sum::<T>() / n;
                        let gym = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((dv, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                            *dv += is * (gv - gm - yv * gym);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, batch, out_channels } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let oc = *out_channels;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(b) = b {
                    acc(*b, grads, &mut |db| {
                        for i in 0..*batch {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (i * oc + o) * cols_n;
                                *d += gd[base..base + cols_n].iter().copied().sum();
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); rows * cols_n];
                if nodes[w.0].needs_grad {
                    acc(*w, grads, &mut |dw| {
                        for i in 0..*batch {
                            im2col(geom, &xv[i * img..(i + 1) * img], &mut cols);
                            let gi = &gd[i * oc * cols_n..(i + 1) * oc * cols_n];
                            // dW[O, R] += G[O, P] . cols^T[P, R]
                            T::gemm(oc, cols_n, rows, gi, (cols_n as isize, 1), &cols, (1, cols_n as isize), dw, (rows as isize, 1), true);
                        }
                    });
                }
                acc(*x, grads, &mut |dx| {
                    for i in 0..*batch {
                        let gi = &gd[i * oc * cols_n..(i + 1) * oc * cols_n];
                        // dcols[R, P] = W^T[R, O] . G[O, P]
                        T::gemm(rows, oc, cols_n, wv, (1, rows as isize), gi, (cols_n as isize, 1), &mut cols, (cols_n as isize, 1), false);
                        col2im(geom, &cols, &mut dx[i * img..(i + 1) * img]);
                    }
                });
            }
            Op::Upsample2x { x, planes, h, w } => {
                acc(*x, grads, &mut |d| {
                    for p in 0..*planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                acc(*x, grads, &mut |d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len().max(1)).unwrap();
                let gv = gd[0] / n;
                acc(*x, grads, &mut |d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::SumLeading { x, count } => {
                let rest = gd.len();
                acc(*x, grads, &mut |d| {
                    for c in 0..*count {
                        d[c * rest..(c + 1) * rest].iter_mut().zip(gd).for_each(|(v, &y)| *v += y);
                    }
                });
            }
            Op::MaxAxis0 { x, cols, argmax } => {
                acc(*x, grads, &mut |d| {
                    for (c, &r) in argmax.iter().enumerate() {
                        d[r * cols + c] += gd[c];
                    }
                });
            }
            Op::MaxAll { x, argmax } => {
                acc(*x, grads, &mut |d| d[*argmax] += gd[0]);
            }
            Op::Gather { table, ids, width } => {
                acc(*table, grads, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &gd[r * width..(r + 1) * width];
                        d[i * width..(i + 1) * width].iter_mut().zip(src).for_each(|(v, &y)| *v += y);
                    }
                });
            }
            Op::SelectLast { x, idx, last } => {
                let k = idx.len();
                acc(*x, grads, &mut |d| {
                    for (row, grow) in d.chunks_mut(*last).zip(gd.chunks(k)) {
                        for (&i, &gv) in idx.iter().zip(grow) {
                            row[i] += gv;
                        }
                    }
                });
            }
        }
    }
}
