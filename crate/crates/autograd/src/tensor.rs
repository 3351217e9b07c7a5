//! Dense row-major tensors and the value-level kernels shared by the graph ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("shape {shape:?} needs {expected} elements, got {actual}")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        match Self::try_from_vec(shape, data) {
            Ok(t) => t,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn try_from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(ShapeError { shape, expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self { shape, data }
    }

    /// `[ids.len(), k]` matrix of exact one-hot rows.
    pub fn one_hot(ids: &[usize], k: usize) -> Self {
        let mut data = vec![T::zero(); ids.len() * k];
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < k, "one_hot index {id} out of range {k}");
            data[row * k + id] = T::one();
        }
        Self { shape: vec![ids.len(), k], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows along the last axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    /// Index of the maximum along the last axis; ties resolve to the lowest index.
    pub fn argmax_last(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        permute(self, perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        narrow(self, axis, start, len)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        concat(parts, axis)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Self {
        sum_axis(self, axis, keepdim)
    }

    /// `[n, k] x [k, m]` style product on the last two axes, batch dims must match
    /// or `other` must be rank 2.
    pub fn matmul(&self, other: &Self) -> Self {
        matmul(self, other, false, false)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn permute<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let rank = t.rank();
    assert_eq!(perm.len(), rank, "permute rank mismatch");
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
        seen[p] = true;
    }
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Tensor { shape: out_shape, data: out };
    }
    if rank == 0 {
        return t.clone();
    }
    let inner = *out_shape.last().unwrap();
    let inner_stride = *src_strides.last().unwrap();
    let outer_rank = rank - 1;
    let mut idx = vec![0usize; outer_rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(t.data[base + j * inner_stride]);
        }
        // odometer over the outer axes
        let mut ax = outer_rank;
        loop {
            if ax == 0 {
                return Tensor { shape: out_shape, data: out };
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn narrow<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, full, inner) = split_axis(&t.shape, axis);
    assert!(start + len <= full, "narrow {start}+{len} exceeds axis {axis} of {:?}", t.shape);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * full + start) * inner;
        data.extend_from_slice(&t.data[from..from + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor { shape, data }
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].shape();
    for p in parts {
        assert_eq!(p.rank(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
        }
    }
    let outer = numel(&first[..axis]);
    let inner = numel(&first[axis + 1..]);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor { shape, data }
}

pub(crate) fn sum_axis<T: Scalar>(t: &Tensor<T>, axis: usize, keepdim: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &t.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor { shape, data }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand's elements map onto a broadcast output.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Same,
    Scalar,
    /// operand repeats every `n` output elements
    Cyclic(usize),
    /// each operand element covers `n` consecutive output elements
    Blocked(usize),
    Gather(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Self {
        let n_op = numel(operand);
        let n_out = numel(out);
        if operand == out {
            return BroadcastMap::Same;
        }
        if n_op == 1 {
            return BroadcastMap::Scalar;
        }
        let rank = out.len();
        let padded: Vec<usize> =
            (0..rank).map(|i| if i + operand.len() >= rank { operand[i + operand.len() - rank] } else { 1 }).collect();
        // operand equals a suffix of the output shape
        let first_full = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[first_full..] == out[first_full..] {
            return BroadcastMap::Cyclic(n_op);
        }
        // operand equals a prefix of the output shape followed by ones
        let last_full = padded.iter().rposition(|&d| d != 1).map(|p| p + 1).unwrap_or(0);
        if padded[..last_full] == out[..last_full] {
            return BroadcastMap::Blocked(n_out / n_op);
        }
        let op_strides = strides(&padded);
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        for _ in 0..n_out {
            let mut off = 0;
            for ax in 0..rank {
                if padded[ax] != 1 {
                    off += idx[ax] * op_strides[ax];
                }
            }
            map.push(off);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        BroadcastMap::Gather(map)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Scalar => 0,
            BroadcastMap::Cyclic(n) => i % n,
            BroadcastMap::Blocked(n) => i / n,
            BroadcastMap::Gather(m) => m[i],
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let out_shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let n = numel(&out_shape);
    if a.shape == out_shape && b.shape == out_shape {
        return Tensor { shape: out_shape, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    }
    let ma = BroadcastMap::new(&a.shape, &out_shape);
    let mb = BroadcastMap::new(&b.shape, &out_shape);
    let data = (0..n).map(|i| f(a.data[ma.index(i)], b.data[mb.index(i)])).collect();
    Tensor { shape: out_shape, data }
}

/// Sums a broadcast-shaped gradient back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let map = BroadcastMap::new(shape, &grad.shape);
    let mut data = vec![T::zero(); numel(shape)];
    for (i, &g) in grad.data.iter().enumerate() {
        data[map.index(i)] += g;
    }
    Tensor { shape: shape.to_vec(), data }
}

/// Batched matrix product on the last two axes.
///
/// `ta`/`tb` mean the stored operand holds the transpose of the logical one.
/// `b` may be rank 2 (shared across the batch) or carry the same batch dims as `a`.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let geo = MatmulGeometry::new(a.shape(), b.shape(), ta, tb);
    let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
    geo.forward(&a.data, &b.data, &mut out);
    Tensor { shape: geo.out_shape.clone(), data: out }
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub ta: bool,
    pub tb: bool,
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulGeometry {
    pub(crate) fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Self {
        assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2, got {a:?} x {b:?}");
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})");
        let batch_dims = &a[..a.len() - 2];
        let b_shared = b.len() == 2;
        if !b_shared {
            assert_eq!(&b[..b.len() - 2], batch_dims, "matmul batch dims differ: {a:?} x {b:?}");
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Self { batch: numel(batch_dims), m, k, n, ta, tb, b_shared, out_shape }
    }

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

    pub(crate) fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.b_shared && !self.ta {
            // fold the batch into rows
            T::gemm(self.batch * m, k, n, a, (k as isize, 1), b, self.b_strides(), T::zero(), out, (n as isize, 1));
            return;
        }
        for bi in 0..self.batch {
            let a_part = &a[bi * m * k..(bi + 1) * m * k];
            let b_part = if self.b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
            let c_part = &mut out[bi * m * n..(bi + 1) * m * n];
            T::gemm(m, k, n, a_part, self.a_strides(), b_part, self.b_strides(), T::zero(), c_part, (n as isize, 1));
        }
    }

    /// Gradient with respect to the stored `a` operand.
    pub(crate) fn grad_a<T: Scalar>(&self, g: &[T], b: &[T], ga: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // dA (m x k) = dC (m x n) . B^T; written in a's storage layout
        let bt_strides = {
            let (r, c) = self.b_strides();
            (c, r)
        };
        let ga_strides = self.a_strides();
        if self.b_shared && !self.ta {
            T::gemm(self.batch * m, n, k, g, (n as isize, 1), b, bt_strides, T::zero(), ga, (k as isize, 1));
            return;
        }
        for bi in 0..self.batch {
            let g_part = &g[bi * m * n..(bi + 1) * m * n];
            let b_part = if self.b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
            let ga_part = &mut ga[bi * m * k..(bi + 1) * m * k];
            T::gemm(m, n, k, g_part, (n as isize, 1), b_part, bt_strides, T::zero(), ga_part, ga_strides);
        }
    }

    /// Gradient with respect to the stored `b` operand.
    pub(crate) fn grad_b<T: Scalar>(&self, g: &[T], a: &[T], gb: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // dB (k x n) = A^T (k x m) . dC (m x n)
        let at_strides = {
            let (r, c) = self.a_strides();
            (c, r)
        };
        let gb_strides = self.b_strides();
        if self.b_shared && !self.ta {
            let rows = self.batch * m;
            T::gemm(k, rows, n, a, (1, k as isize), g, (n as isize, 1), T::zero(), gb, gb_strides);
            return;
        }
        for bi in 0..self.batch {
            let a_part = &a[bi * m * k..(bi + 1) * m * k];
            let g_part = &g[bi * m * n..(bi + 1) * m * n];
            if self.b_shared {
                T::gemm(k, m, n, a_part, at_strides, g_part, (n as isize, 1), T::one(), gb, gb_strides);
            } else {
                let gb_part = &mut gb[bi * k * n..(bi + 1) * k * n];
                T::gemm(k, m, n, a_part, at_strides, g_part, (n as isize, 1), T::zero(), gb_part, gb_strides);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data)
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let x = t(&[2, 3], &[1.0, 3.0, 3.0, 2.0, 2.0, 2.0]);
        assert_eq!(x.argmax_last(), vec![1, 0]);
    }

    #[test]
    fn permute_swaps_axes() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.permute(&[1, 0]);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(y.permute(&[1, 0]), x);
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let x = t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let a = x.narrow(1, 0, 1);
        let b = x.narrow(1, 1, 3);
        assert_eq!(a.data(), &[0.0, 4.0]);
        assert_eq!(Tensor::concat(&[&a, &b], 1), x);
    }

    #[test]
    fn broadcast_middle_axis() {
        let x = t(&[2, 2, 2], &[1.0; 8]);
        let y = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = broadcast_binary(&x, &y, |a, b| a * b);
        assert_eq!(z.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let r = reduce_to_shape(&z, &[2, 1, 2]);
        assert_eq!(r.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn batched_matmul_with_shared_weight() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let c = a.matmul(&w);
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[1.0, 4.0, 3.0, 8.0]);
    }
}
