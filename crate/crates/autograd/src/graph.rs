//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{
    broadcast_binary, broadcast_shape, concat, narrow, numel, permute, reduce_to_shape, split_axis, sum_axis,
    MatmulGeometry,
};
use crate::{Scalar, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Gelu,
    Relu,
    LeakyRelu(T),
    Sqrt,
    Square,
    Abs,
    Clamp(T, T),
}

/// Geometry of an NHWC convolution with `[kh*kw*cin, cout]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Calls `f(row, col_offset, input_offset)` for every in-bounds channel run.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.k + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf { param: Option<(u64, usize)> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary<T>),
    Matmul { a: usize, b: usize, geo: MatmulGeometry },
    SumAxis { x: usize, axis: usize },
    SumAll(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<T> },
    RmsNorm { x: usize, inv_rms: Vec<T> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    BroadcastTo(usize),
    IndexSelect { x: usize, indices: Vec<usize> },
    Conv2d { x: usize, w: usize, geo: ConvGeometry, cols: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<(u64, usize), usize>>,
    track: bool,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that tracks gradients.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), param_leaves: RefCell::new(HashMap::new()), track: true }
    }

    /// A graph that never records backward information.
    pub fn inference() -> Self {
        Self { track: false, ..Self::new() }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = self.track && requires_grad;
        let op = if requires_grad { op } else { Op::Leaf { param: None } };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push_shared(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = self.track && requires_grad;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Loads a trainable parameter. Repeated loads of the same parameter share one leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let key = (store.uid(), id.0);
        if let Some(&node) = self.param_leaves.borrow().get(&key) {
            return Var { graph: self, id: node };
        }
        let var = self.push_shared(store.shared(id), Op::Leaf { param: Some(key) }, true);
        self.param_leaves.borrow_mut().insert(key, var.id);
        var
    }

    /// Loads a parameter as a constant; used for frozen modules.
    pub fn frozen(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        self.push_shared(store.shared(id), Op::Leaf { param: None }, false)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| self.value(p.id)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let out = concat(&refs, axis);
        let req = parts.iter().any(|p| self.requires(p.id));
        self.push(out, Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis }, req)
    }

    /// Reverse-mode differentiation of a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        assert!(self.track, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.numel(), 1, "backward root must be a scalar, got {:?}", root_value.shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
        let mut out = Gradients::default();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor<T>>>, parent: usize, grad: Tensor<T>| {
                if !nodes[parent].requires_grad {
                    return;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let val = |i: usize| &*nodes[i].value;
            match &node.op {
                Op::Leaf { param } => {
                    match param {
                        Some(key) => {
                            out.params.insert(*key, g);
                        }
                        None => {
                            out.leaves.insert(id, g);
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, reduce_to_shape(&g, val(*a).shape()));
                    send(&mut grads, *b, reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, reduce_to_shape(&g, val(*a).shape()));
                    send(&mut grads, *b, reduce_to_shape(&g.map(|v| -v), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary(&g, vb, |x, y| x * y);
                        send(&mut grads, *a, reduce_to_shape(&ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast_binary(&g, va, |x, y| x * y);
                        send(&mut grads, *b, reduce_to_shape(&gb, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary(&g, vb, |x, y| x / y);
                        send(&mut grads, *a, reduce_to_shape(&ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let q = broadcast_binary(&g, &node.value, |x, y| x * y);
                        let gb = broadcast_binary(&q, vb, |x, y| -x / y);
                        send(&mut grads, *b, reduce_to_shape(&gb, vb.shape()));
                    }
                }
                Op::Neg(a) => send(&mut grads, *a, g.map(|v| -v)),
                Op::Scale(a, s) => {
                    let s = *s;
                    send(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => send(&mut grads, *a, g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                        .collect();
                    send(&mut grads, *a, Tensor::from_vec(x.shape().to_vec(), data));
                }
                Op::Matmul { a, b, geo } => {
                    if nodes[*a].requires_grad {
                        let mut ga = vec![T::zero(); val(*a).numel()];
                        geo.grad_a(g.data(), val(*b).data(), &mut ga);
                        send(&mut grads, *a, Tensor::from_vec(val(*a).shape().to_vec(), ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![T::zero(); val(*b).numel()];
                        geo.grad_b(g.data(), val(*a).data(), &mut gb);
                        send(&mut grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), gb));
                    }
                }
                Op::SumAxis { x, axis } => {
                    let shape = val(*x).shape().to_vec();
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    let mut data = Vec::with_capacity(numel(&shape));
                    let gd = g.data();
                    for o in 0..outer {
                        for _ in 0..len {
                            data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(shape, data));
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    send(&mut grads, *x, Tensor::full(val(*x).shape().to_vec(), gv));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let k = y.last_dim();
                    let mut data = Vec::with_capacity(y.numel());
                    for (gr, yr) in g.data().chunks_exact(k).zip(y.data().chunks_exact(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    send(&mut grads, *x, Tensor::from_vec(y.shape().to_vec(), data));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let k = y.last_dim();
                    let mut data = Vec::with_capacity(y.numel());
                    for (gr, yr) in g.data().chunks_exact(k).zip(y.data().chunks_exact(k)) {
                        let total: T = gr.iter().copied().sum();
                        data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
                    }
                    send(&mut grads, *x, Tensor::from_vec(y.shape().to_vec(), data));
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let k = y.last_dim();
                    let kf = T::of(k as f64);
                    let mut data = Vec::with_capacity(y.numel());
                    for ((gr, yr), &r) in g.data().chunks_exact(k).zip(y.data().chunks_exact(k)).zip(inv_std) {
                        let mg: T = gr.iter().copied().sum::<T>() / kf;
                        let mgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / kf;
                        data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| r * (gi - mg - yi * mgy)));
                    }
                    send(&mut grads, *x, Tensor::from_vec(y.shape().to_vec(), data));
                }
                Op::RmsNorm { x, inv_rms } => {
                    let y = &node.value;
                    let k = y.last_dim();
                    let kf = T::of(k as f64);
                    let mut data = Vec::with_capacity(y.numel());
                    for ((gr, yr), &r) in g.data().chunks_exact(k).zip(y.data().chunks_exact(k)).zip(inv_rms) {
                        let mgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / kf;
                        data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| r * (gi - yi * mgy)));
                    }
                    send(&mut grads, *x, Tensor::from_vec(y.shape().to_vec(), data));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(&mut grads, *x, g.reshape(shape));
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(&mut grads, *x, permute(&g, &inv));
                }
                Op::Narrow { x, axis, start } => {
                    let shape = val(*x).shape().to_vec();
                    let (outer, full, inner) = split_axis(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut data = vec![T::zero(); numel(&shape)];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    send(&mut grads, *x, Tensor::from_vec(shape, data));
                }
                Op::Concat { xs, axis } => {
                    let mut start = 0;
                    for &x in xs {
                        let len = val(x).shape()[*axis];
                        if nodes[x].requires_grad {
                            send(&mut grads, x, narrow(&g, *axis, start, len));
                        }
                        start += len;
                    }
                }
                Op::BroadcastTo(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(&mut grads, *x, reduce_to_shape(&g, &shape));
                }
                Op::IndexSelect { x, indices } => {
                    let shape = val(*x).shape().to_vec();
                    let row = numel(&shape[1..]);
                    let mut data = vec![T::zero(); numel(&shape)];
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = &mut data[idx * row..(idx + 1) * row];
                        for (d, &s) in dst.iter_mut().zip(&g.data()[i * row..(i + 1) * row]) {
                            *d += s;
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(shape, data));
                }
                Op::Conv2d { x, w, geo, cols } => {
                    let (rows, patch, cout) = (geo.rows(), geo.patch(), geo.cout);
                    if nodes[*w].requires_grad {
                        let mut gw = vec![T::zero(); patch * cout];
                        T::gemm(
                            patch,
                            rows,
                            cout,
                            cols,
                            (1, patch as isize),
                            g.data(),
                            (cout as isize, 1),
                            T::zero(),
                            &mut gw,
                            (cout as isize, 1),
                        );
                        send(&mut grads, *w, Tensor::from_vec(vec![patch, cout], gw));
                    }
                    if nodes[*x].requires_grad {
                        let mut gcols = vec![T::zero(); rows * patch];
                        T::gemm(
                            rows,
                            cout,
                            patch,
                            g.data(),
                            (cout as isize, 1),
                            val(*w).data(),
                            (1, cout as isize),
                            T::zero(),
                            &mut gcols,
                            (patch as isize, 1),
                        );
                        let shape = val(*x).shape().to_vec();
                        let mut gx = vec![T::zero(); numel(&shape)];
                        let cin = geo.cin;
                        geo.for_each_tap(|row, col, src| {
                            let from = &gcols[row * patch + col..row * patch + col + cin];
                            for (d, &s) in gx[src..src + cin].iter_mut().zip(from) {
                                *d += s;
                            }
                        });
                        send(&mut grads, *x, Tensor::from_vec(shape, gx));
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let shape = val(*logits).shape().to_vec();
                    let k = *shape.last().unwrap();
                    let scale = g.item() / T::of(targets.len() as f64);
                    let mut data: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &t) in targets.iter().enumerate() {
                        data[row * k + t] -= scale;
                    }
                    send(&mut grads, *logits, Tensor::from_vec(shape, data));
                }
            }
        }
        out
    }
}

fn unary_forward<T: Scalar>(kind: Unary<T>, x: T) -> T {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Relu => x.max(T::zero()),
        Unary::LeakyRelu(a) => {
            if x > T::zero() {
                x
            } else {
                a * x
            }
        }
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::Clamp(lo, hi) => x.max(lo).min(hi),
    }
}

fn unary_derivative<T: Scalar>(kind: Unary<T>, x: T, y: T) -> T {
    match kind {
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s + x * s * (T::one() - s)
        }
        Unary::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            let t = u.tanh();
            let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
            T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::LeakyRelu(a) => {
            if x > T::zero() {
                T::one()
            } else {
                a
            }
        }
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Square => T::of(2.0) * x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn unary_op(self, kind: Unary<T>) -> Self {
        let x = self.value();
        let y = x.map(|v| unary_forward(kind, v));
        self.graph.push(y, Op::Unary(self.id, kind), self.requires_grad())
    }

    fn binary_op(self, other: Self, f: impl Fn(T, T) -> T, op: Op<T>) -> Self {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, f);
        let req = self.requires_grad() || other.requires_grad();
        self.graph.push(out, op, req)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Self {
        self.graph.push_shared(self.value(), Op::Leaf { param: None }, false)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary_op(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary_op(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary_op(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Self) -> Self {
        self.binary_op(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Self {
        let y = self.value().map(|v| -v);
        self.graph.push(y, Op::Neg(self.id), self.requires_grad())
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::of(s);
        let y = self.value().map(|v| v * s);
        self.graph.push(y, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        let y = self.value().map(|v| v + c);
        self.graph.push(y, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn exp(self) -> Self {
        self.unary_op(Unary::Exp)
    }

    pub fn log(self) -> Self {
        self.unary_op(Unary::Log)
    }

    pub fn tanh(self) -> Self {
        self.unary_op(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Self {
        self.unary_op(Unary::Sigmoid)
    }

    pub fn silu(self) -> Self {
        self.unary_op(Unary::Silu)
    }

    /// tanh approximation
    pub fn gelu(self) -> Self {
        self.unary_op(Unary::Gelu)
    }

    pub fn relu(self) -> Self {
        self.unary_op(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        self.unary_op(Unary::LeakyRelu(T::of(slope)))
    }

    pub fn sqrt(self) -> Self {
        self.unary_op(Unary::Sqrt)
    }

    pub fn square(self) -> Self {
        self.unary_op(Unary::Square)
    }

    pub fn abs(self) -> Self {
        self.unary_op(Unary::Abs)
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        self.unary_op(Unary::Clamp(T::of(lo), T::of(hi)))
    }

    pub fn matmul(self, other: Self) -> Self {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ` on the last two axes.
    pub fn matmul_t(self, other: Self) -> Self {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(self, other: Self, ta: bool, tb: bool) -> Self {
        let (a, b) = (self.value(), other.value());
        let geo = MatmulGeometry::new(a.shape(), b.shape(), ta, tb);
        let mut out = vec![T::zero(); numel(&geo.out_shape)];
        geo.forward(a.data(), b.data(), &mut out);
        let value = Tensor::from_vec(geo.out_shape.clone(), out);
        let req = self.requires_grad() || other.requires_grad();
        self.graph.push(value, Op::Matmul { a: self.id, b: other.id, geo }, req)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Self {
        let y = sum_axis(&self.value(), axis, keepdim);
        self.graph.push(y, Op::SumAxis { x: self.id, axis }, self.requires_grad())
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Self {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn sum_last(self, keepdim: bool) -> Self {
        let axis = self.shape().len() - 1;
        self.sum_axis(axis, keepdim)
    }

    pub fn mean_last(self, keepdim: bool) -> Self {
        let axis = self.shape().len() - 1;
        self.mean_axis(axis, keepdim)
    }

    pub fn sum_all(self) -> Self {
        let y = Tensor::scalar(self.value().sum());
        self.graph.push(y, Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean_all(self) -> Self {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let k = x.last_dim();
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - m).exp();
                total += e;
                data.push(e);
            }
            for d in &mut data[start..] {
                *d /= total;
            }
        }
        let y = Tensor::from_vec(x.shape().to_vec(), data);
        self.graph.push(y, Op::Softmax(self.id), self.requires_grad())
    }

    pub fn log_softmax_last(self) -> Self {
        let x = self.value();
        let k = x.last_dim();
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let y = Tensor::from_vec(x.shape().to_vec(), data);
        self.graph.push(y, Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Self {
        let x = self.value();
        let k = x.last_dim();
        let kf = T::of(k as f64);
        let eps = T::of(eps);
        let mut data = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.numel() / k.max(1));
        for row in x.data().chunks_exact(k) {
            let mean = row.iter().copied().sum::<T>() / kf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / kf;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            data.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let y = Tensor::from_vec(x.shape().to_vec(), data);
        self.graph.push(y, Op::LayerNorm { x: self.id, inv_std }, self.requires_grad())
    }

    /// Divides the last axis by its root mean square (no affine).
    pub fn rms_norm(self, eps: f64) -> Self {
        let x = self.value();
        let k = x.last_dim();
        let kf = T::of(k as f64);
        let eps = T::of(eps);
        let mut data = Vec::with_capacity(x.numel());
        let mut inv_rms = Vec::with_capacity(x.numel() / k.max(1));
        for row in x.data().chunks_exact(k) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / kf;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().map(|&v| v * r));
        }
        let y = Tensor::from_vec(x.shape().to_vec(), data);
        self.graph.push(y, Op::RmsNorm { x: self.id, inv_rms }, self.requires_grad())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let y = (*self.value()).clone().reshape(shape);
        self.graph.push(y, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Self {
        let y = permute(&self.value(), perm);
        self.graph.push(y, Op::Permute { x: self.id, perm: perm.to_vec() }, self.requires_grad())
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Self {
        let r = self.shape().len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let y = narrow(&self.value(), axis, start, len);
        self.graph.push(y, Op::Narrow { x: self.id, axis, start }, self.requires_grad())
    }

    pub fn broadcast_to(self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let x = self.value();
        let out = broadcast_shape(x.shape(), &shape);
        assert_eq!(out.as_deref(), Some(shape.as_slice()), "cannot broadcast {:?} to {:?}", x.shape(), shape);
        let zeros = Tensor::zeros(shape);
        let y = broadcast_binary(&zeros, &x, |_, b| b);
        self.graph.push(y, Op::BroadcastTo(self.id), self.requires_grad())
    }

    /// Rows of a table along axis 0.
    pub fn index_select(self, indices: &[usize]) -> Self {
        let x = self.value();
        let shape = x.shape();
        let row = numel(&shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < shape[0], "index {i} out of range for axis of {}", shape[0]);
            data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let y = Tensor::from_vec(out_shape, data);
        self.graph.push(y, Op::IndexSelect { x: self.id, indices: indices.to_vec() }, self.requires_grad())
    }

    /// NHWC convolution; `weight` is `[k*k*cin, cout]` with rows ordered `(ky, kx, c)`.
    pub fn conv2d(self, weight: Self, spec: ConvSpec) -> Self {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.rank(), 4, "conv2d input must be NHWC, got {:?}", x.shape());
        let (batch, h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let k = spec.kernel;
        assert_eq!(w.dim(0), k * k * cin, "conv2d weight rows {} != k*k*cin {}", w.dim(0), k * k * cin);
        let cout = w.dim(1);
        assert!(h + 2 * spec.pad >= k && wd + 2 * spec.pad >= k, "conv2d kernel larger than padded input");
        let ho = (h + 2 * spec.pad - k) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - k) / spec.stride + 1;
        let geo = ConvGeometry { batch, h, w: wd, cin, cout, k, stride: spec.stride, pad: spec.pad, ho, wo };
        let (rows, patch) = (geo.rows(), geo.patch());
        let mut cols = vec![T::zero(); rows * patch];
        let xd = x.data();
        geo.for_each_tap(|row, col, src| {
            cols[row * patch + col..row * patch + col + cin].copy_from_slice(&xd[src..src + cin]);
        });
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(rows, patch, cout, &cols, (patch as isize, 1), w.data(), (cout as isize, 1), T::zero(), &mut out, (cout as isize, 1));
        let y = Tensor::from_vec(vec![batch, ho, wo, cout], out);
        let req = self.requires_grad() || weight.requires_grad();
        let cols = if req { cols } else { Vec::new() };
        self.graph.push(y, Op::Conv2d { x: self.id, w: weight.id, geo, cols }, req)
    }

    /// Mean cross-entropy of last-axis logits against integer targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Self {
        let x = self.value();
        let k = x.last_dim();
        assert_eq!(x.numel() / k, targets.len(), "cross_entropy: {} rows vs {} targets", x.numel() / k, targets.len());
        let mut probs = Vec::with_capacity(x.numel());
        let mut total = T::zero();
        for (row, &t) in x.data().chunks_exact(k).zip(targets) {
            assert!(t < k, "target {t} out of range {k}");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
        let y = Tensor::scalar(total / T::of(targets.len() as f64));
        self.graph.push(y, Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs }, self.requires_grad())
    }
}

macro_rules! impl_var_binop {
    ($trait:ident, $method:ident) => {
        impl<'g, T: Scalar> std::ops::$trait for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                Var::$method(self, rhs)
            }
        }
    };
}

impl_var_binop!(Add, add);
impl_var_binop!(Sub, sub);
impl_var_binop!(Mul, mul);
impl_var_binop!(Div, div);

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
