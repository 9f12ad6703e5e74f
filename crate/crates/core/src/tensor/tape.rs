use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{gemm, ConvGeometry, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Records operations for one forward pass so they can be differentiated.
///
/// A tape is single-threaded and meant to be rebuilt for every step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_transposed: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale { x: usize, factor: f64 },
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape(usize),
    Slice { x: usize, axis: usize, start: usize },
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    GatherRows { table: usize, indices: Vec<usize> },
    Select { x: usize, indices: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, normed: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: usize, weight: usize, bias: usize, geom: ConvGeometry, cols: Vec<f64> },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed into `var`.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into (outer, axis length, inner) around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Result shape of an elementwise binary op; a one-element operand
/// broadcasts against the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

/// Adds `g` into a gradient slot, summing when the target was broadcast.
fn accumulate_broadcast(slot: &mut Option<Vec<f64>>, len: usize, g: impl Iterator<Item = f64>) {
    accumulate(slot, len, |dst| {
        if len == 1 {
            dst[0] += g.sum::<f64>();
        } else {
            dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
    });
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf holding a copy of `t`; gradients are tracked when
    /// `t.requires_grad()` is set.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let base = &nodes[first.id].shape;
            check_axis("concat", base, axis)?;
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                let same_rank = s.len() == base.len();
                if !same_rank || s.iter().zip(base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                    return Err(Error::shape("concat", base, s));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let chunk = n.shape[axis] * inner;
                    value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, value)
        };
        let inputs: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&inputs);
        Ok(self.push(shape, value, Op::Concat { inputs, axis }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &[f64] { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_transposed } => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = node.shape[1];
            if rg(a) {
                let mut da = vec![0.0; m * k];
                let bm = if *b_transposed {
                    MatRef::new(val(b), n, k)
                } else {
                    MatRef::t(val(b), k, n)
                };
                gemm(MatRef::new(g, m, n), bm, 0.0, &mut da);
                accumulate_broadcast(&mut grads[a], m * k, da.into_iter());
            }
            if rg(b) {
                let mut db = vec![0.0; k * n];
                if *b_transposed {
                    // b stored N×K: db = gᵀ·a
                    gemm(MatRef::t(g, m, n), MatRef::new(val(a), m, k), 0.0, &mut db);
                } else {
                    gemm(MatRef::t(val(a), m, k), MatRef::new(g, m, n), 0.0, &mut db);
                }
                accumulate_broadcast(&mut grads[b], k * n, db.into_iter());
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(*a) {
                accumulate_broadcast(&mut grads[*a], len(*a), g.iter().copied());
            }
            if rg(*b) {
                accumulate_broadcast(&mut grads[*b], len(*b), g.iter().map(|v| sign * v));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                accumulate_broadcast(
                    &mut grads[*a],
                    len(*a),
                    g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)),
                );
            }
            if rg(*b) {
                accumulate_broadcast(
                    &mut grads[*b],
                    len(*b),
                    g.iter().enumerate().map(|(i, gi)| gi * at(va, i)),
                );
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                accumulate_broadcast(
                    &mut grads[*a],
                    len(*a),
                    g.iter().enumerate().map(|(i, gi)| gi / at(vb, i)),
                );
            }
            if rg(*b) {
                accumulate_broadcast(
                    &mut grads[*b],
                    len(*b),
                    g.iter().enumerate().map(|(i, gi)| {
                        let d = at(vb, i);
                        -gi * at(va, i) / (d * d)
                    }),
                );
            }
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let take_max = matches!(node.op, Op::Maximum(..));
            let (va, vb) = (val(*a), val(*b));
            // Ties route the gradient to the first operand.
            let first_wins = |i: usize| {
                let (x, y) = (at(va, i), at(vb, i));
                if take_max {
                    x >= y
                } else {
                    x <= y
                }
            };
            if rg(*a) {
                accumulate_broadcast(
                    &mut grads[*a],
                    len(*a),
                    g.iter().enumerate().map(|(i, gi)| if first_wins(i) { *gi } else { 0.0 }),
                );
            }
            if rg(*b) {
                accumulate_broadcast(
                    &mut grads[*b],
                    len(*b),
                    g.iter().enumerate().map(|(i, gi)| if first_wins(i) { 0.0 } else { *gi }),
                );
            }
        }
        Op::AddBias { x, bias } => {
            if rg(*x) {
                accumulate_broadcast(&mut grads[*x], len(*x), g.iter().copied());
            }
            if rg(*bias) {
                let n = len(*bias);
                accumulate(&mut grads[*bias], n, |db| {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::Scale { x, factor } => {
            if rg(*x) {
                accumulate_broadcast(&mut grads[*x], len(*x), g.iter().map(|v| v * factor));
            }
        }
        Op::AddScalar(x) => {
            if rg(*x) {
                accumulate_broadcast(&mut grads[*x], len(*x), g.iter().copied());
            }
        }
        Op::Relu(x) => {
            if rg(*x) {
                let vx = val(*x);
                accumulate_broadcast(
                    &mut grads[*x],
                    len(*x),
                    g.iter().zip(vx).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }),
                );
            }
        }
        Op::Sigmoid(x) => {
            if rg(*x) {
                accumulate_broadcast(
                    &mut grads[*x],
                    len(*x),
                    g.iter().zip(&node.value).map(|(gi, y)| gi * y * (1.0 - y)),
                );
            }
        }
        Op::Abs(x) => {
            if rg(*x) {
                let vx = val(*x);
                accumulate_broadcast(
                    &mut grads[*x],
                    len(*x),
                    g.iter().zip(vx).map(|(gi, xi)| {
                        if *xi > 0.0 {
                            *gi
                        } else if *xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }),
                );
            }
        }
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            if !rg(*x) {
                return;
            }
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, n, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    if log {
                        let gsum: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = g[idx(i)] - y[idx(i)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
            accumulate_broadcast(&mut grads[*x], len(*x), dx.into_iter());
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for o in 0..outer {
                for &p in inputs {
                    let chunk = nodes[p].shape[*axis] * inner;
                    if rg(p) {
                        let src = &g[offset..offset + chunk];
                        accumulate(&mut grads[p], len(p), |dst| {
                            dst[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        });
                    }
                    offset += chunk;
                }
            }
        }
        Op::Reshape(x) => {
            if rg(*x) {
                accumulate_broadcast(&mut grads[*x], len(*x), g.iter().copied());
            }
        }
        Op::Slice { x, axis, start } => {
            if rg(*x) {
                let src_shape = &nodes[*x].shape;
                let (outer, n_src, inner) = axis_split(src_shape, *axis);
                let n_out = node.shape[*axis];
                accumulate(&mut grads[*x], len(*x), |dst| {
                    for o in 0..outer {
                        let d0 = (o * n_src + start) * inner;
                        let s0 = o * n_out * inner;
                        dst[d0..d0 + n_out * inner]
                            .iter_mut()
                            .zip(&g[s0..s0 + n_out * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::Transpose(x) => {
            if rg(*x) {
                let (r, c) = (node.shape[0], node.shape[1]);
                // g is r×c; the input was c×r.
                accumulate(&mut grads[*x], len(*x), |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                let n = len(*x);
                accumulate_broadcast(&mut grads[*x], n, std::iter::repeat(g[0]).take(n));
            }
        }
        Op::Mean(x) => {
            if rg(*x) {
                let n = len(*x);
                let v = g[0] / n as f64;
                accumulate_broadcast(&mut grads[*x], n, std::iter::repeat(v).take(n));
            }
        }
        Op::GatherRows { table, indices } => {
            if rg(*table) {
                let d = nodes[*table].shape[1];
                accumulate(&mut grads[*table], len(*table), |dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        dst[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
        Op::Select { x, indices } => {
            if rg(*x) {
                accumulate(&mut grads[*x], len(*x), |dst| {
                    for (gi, &i) in g.iter().zip(indices) {
                        dst[i] += gi;
                    }
                });
            }
        }
        Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
            let d = nodes[*gamma].value.len();
            let gam = val(*gamma);
            if rg(*x) {
                let mut dx = vec![0.0; normed.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let xh = &normed[rows.clone()];
                    let gr = &g[rows.clone()];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for i in 0..d {
                        let dxh = gr[i] * gam[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for i in 0..d {
                        let dxh = gr[i] * gam[i];
                        dx[r * d + i] = inv * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                accumulate_broadcast(&mut grads[*x], len(*x), dx.into_iter());
            }
            if rg(*gamma) {
                accumulate(&mut grads[*gamma], d, |dg| {
                    for (gr, xh) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * xh[i];
                        }
                    }
                });
            }
            if rg(*beta) {
                accumulate(&mut grads[*beta], d, |db| {
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
        Op::Conv2d { x, weight, bias, geom, cols } => {
            let c_out = nodes[*weight].shape[0];
            let (kr, kc) = (geom.col_rows(), geom.col_cols());
            if rg(*weight) {
                let mut dw = vec![0.0; c_out * kr];
                gemm(MatRef::new(g, c_out, kc), MatRef::t(cols, kr, kc), 0.0, &mut dw);
                accumulate_broadcast(&mut grads[*weight], c_out * kr, dw.into_iter());
            }
            if rg(*bias) {
                accumulate(&mut grads[*bias], c_out, |db| {
                    for (o, row) in g.chunks_exact(kc).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                });
            }
            if rg(*x) {
                let mut dcols = vec![0.0; kr * kc];
                gemm(MatRef::t(val(*weight), c_out, kr), MatRef::new(g, c_out, kc), 0.0, &mut dcols);
                accumulate(&mut grads[*x], len(*x), |dx| geom.col2im_add(&dcols, dx));
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        let n = self.node();
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    /// Runs `f` over the raw value without copying it.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.node().value)
    }

    pub fn item(&self) -> f64 {
        let n = self.node();
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value, rg) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, &a.shape, &b.shape)?;
            let value = (0..numel(&shape))
                .map(|i| f(at(&a.value, i), at(&b.value, i)))
                .collect::<Vec<_>>();
            (shape, value)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Matrix product `self · other` for rank-2 operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'t>, b_transposed: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (kb, n) = if b_transposed {
                (b.shape[1], b.shape[0])
            } else {
                (b.shape[0], b.shape[1])
            };
            if k != kb {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let bm = if b_transposed {
                MatRef::t(&b.value, n, k)
            } else {
                MatRef::new(&b.value, k, n)
            };
            let mut c = vec![0.0; m * n];
            gemm(MatRef::new(&a.value, m, k), bm, 0.0, &mut c);
            (vec![m, n], c)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                b_transposed,
            },
            rg,
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn maximum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", f64::max, Op::Maximum(self.id, other.id))
    }

    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "minimum", f64::min, Op::Minimum(self.id, other.id))
    }

    /// Adds a length-N vector to every row of an `M×N` matrix.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let cols = *x.shape.last().unwrap_or(&0);
            if b.value.len() != cols || b.shape.len() != 1 {
                return Err(Error::shape("add_bias", &x.shape, &b.shape));
            }
            let mut value = x.value.clone();
            for row in value.chunks_exact_mut(cols) {
                row.iter_mut().zip(&b.value).for_each(|(v, bb)| *v += bb);
            }
            (x.shape.clone(), value)
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(shape, value, Op::AddBias { x: self.id, bias: bias.id }, rg))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(|v| v * factor, Op::Scale { x: self.id, factor })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let n = self.node();
            check_axis("softmax", &n.shape, axis)?;
            let (outer, len, inner) = axis_split(&n.shape, axis);
            let x = &n.value;
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + j;
                    let max = (0..len).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..len).map(|i| (x[idx(i)] - max).exp()).sum();
                    for i in 0..len {
                        let z = x[idx(i)] - max;
                        y[idx(i)] = if log { z - sum.ln() } else { z.exp() / sum };
                    }
                }
            }
            (n.shape.clone(), y, n.requires_grad)
        };
        let op = if log {
            Op::LogSoftmax { x: self.id, axis }
        } else {
            Op::Softmax { x: self.id, axis }
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.node();
            if numel(shape) != n.value.len() || shape.iter().any(|&d| d == 0) {
                return Err(Error::shape("reshape", &n.shape, shape));
            }
            (n.value.clone(), n.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let n = self.node();
            check_axis("slice", &n.shape, axis)?;
            if len == 0 || start + len > n.shape[axis] {
                return Err(Error::contract(format!(
                    "slice [{start}, {}) outside axis {axis} of {:?}",
                    start + len,
                    n.shape
                )));
            }
            let (outer, n_src, inner) = axis_split(&n.shape, axis);
            let mut value = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s0 = (o * n_src + start) * inner;
                value.extend_from_slice(&n.value[s0..s0 + len * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, value, n.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Slice { x: self.id, axis, start }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let n = self.node();
            if n.shape.len() != 2 {
                return Err(Error::contract(format!("transpose of rank-{} tensor", n.shape.len())));
            }
            let (r, c) = (n.shape[0], n.shape[1]);
            let mut value = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    value[j * r + i] = n.value[i * c + j];
                }
            }
            (vec![c, r], value, n.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let (v, rg) = {
            let n = self.node();
            (n.value.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (v, rg) = {
            let n = self.node();
            (n.value.iter().sum::<f64>() / n.value.len() as f64, n.requires_grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Mean(self.id), rg)
    }

    /// Gathers rows of a rank-2 table; gradients scatter-add back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let n = self.node();
            if n.shape.len() != 2 {
                return Err(Error::contract("gather_rows needs a rank-2 table"));
            }
            let (v, d) = (n.shape[0], n.shape[1]);
            if indices.is_empty() {
                return Err(Error::contract("gather_rows with no indices"));
            }
            let mut value = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(Error::Index { index: i, len: v });
                }
                value.extend_from_slice(&n.value[i * d..(i + 1) * d]);
            }
            (vec![indices.len(), d], value, n.requires_grad)
        };
        let op = Op::GatherRows {
            table: self.id,
            indices: indices.to_vec(),
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Picks flat elements into a rank-1 tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.node();
            if indices.is_empty() {
                return Err(Error::contract("select with no indices"));
            }
            let mut value = Vec::with_capacity(indices.len());
            for &i in indices {
                if i >= n.value.len() {
                    return Err(Error::Index {
                        index: i,
                        len: n.value.len(),
                    });
                }
                value.push(n.value[i]);
            }
            (value, n.requires_grad)
        };
        let op = Op::Select {
            x: self.id,
            indices: indices.to_vec(),
        };
        Ok(self.tape.push(vec![indices.len()], value, op, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (shape, value, normed, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let d = *x.shape.last().unwrap_or(&0);
            if g.shape != [d] || b.shape != [d] {
                return Err(Error::shape("layer_norm", &x.shape, &g.shape));
            }
            let rows = x.value.len() / d;
            let mut normed = vec![0.0; x.value.len()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; x.value.len()];
            for r in 0..rows {
                let xr = &x.value[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for i in 0..d {
                    let xh = (xr[i] - mean) * inv;
                    normed[r * d + i] = xh;
                    y[r * d + i] = xh * g.value[i] + b.value[i];
                }
            }
            (x.shape.clone(), y, normed, inv_std)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            normed,
            inv_std,
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Cross-correlation of a `C_in×H×W` image with `C_out×C_in×k×k`
    /// weights; padding is `k/2`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (shape, value, geom, cols) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 3 || w.shape.len() != 4 {
                return Err(Error::shape("conv2d", &x.shape, &w.shape));
            }
            let (c_out, c_in, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
            if c_in != x.shape[0] || kh != kw || b.shape != [c_out] {
                return Err(Error::shape("conv2d", &x.shape, &w.shape));
            }
            if !(kh == 1 || kh == 3) || !(stride == 1 || stride == 2) {
                return Err(Error::contract(format!(
                    "conv2d supports kernel 1|3 and stride 1|2, got kernel {kh} stride {stride}"
                )));
            }
            let geom = ConvGeometry::new(c_in, x.shape[1], x.shape[2], kh, stride);
            let cols = geom.im2col(&x.value);
            let (kr, kc) = (geom.col_rows(), geom.col_cols());
            let mut out = vec![0.0; c_out * kc];
            for (o, row) in out.chunks_exact_mut(kc).enumerate() {
                row.iter_mut().for_each(|v| *v = b.value[o]);
            }
            gemm(MatRef::new(&w.value, c_out, kr), MatRef::new(&cols, kr, kc), 1.0, &mut out);
            (vec![c_out, geom.h_out, geom.w_out], out, geom, cols)
        };
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        let op = Op::Conv2d {
            x: self.id,
            weight: weight.id,
            bias: bias.id,
            geom,
            cols,
        };
        Ok(self.tape.push(shape, value, op, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(&Tensor::eye(2));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.constant(&t(&[2, 1], &[5.0, 6.0]));
        let out = m.matmul(col).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let u = tape.constant(&Tensor::zeros(&[4])).softmax(0).unwrap();
        u.value().data().iter().for_each(|&v| assert!((v - 0.25).abs() < 1e-15));

        let big = tape.constant(&t(&[2], &[1000.0, 0.0])).softmax(0).unwrap().value();
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);

        let logs = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let p = tape.constant(&logs).softmax(0).unwrap().value();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = tape.constant(&t(&[2, 3, 4], &data));
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap().value();
            let shape = y.shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, axis);
            for o in 0..outer {
                for j in 0..inner {
                    let s: f64 = (0..n).map(|i| y.data()[(o * n + i) * inner + j]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(x.softmax(3).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let r = tape.constant(&t(&[2], &[-1.0, 2.0])).relu().value();
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert_eq!(tape.constant(&Tensor::scalar(0.0)).sigmoid().item(), 0.5);
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 3]));
        assert_eq!(tape.concat(&[a, b], 0).unwrap().shape(), vec![6, 3]);
        assert!(tape.concat(&[a, b], 1).is_err());
        assert!(a.add(b).is_err());
    }

    #[test]
    fn concat_and_slice_on_inner_axis() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[9.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = c.slice(1, 1, 2).unwrap();
        assert_eq!(s.value().data(), &[2.0, 9.0, 4.0, 8.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_through_matmul_with_constant() {
        // loss = Σ (x·c): dL/dx[i][k] = Σ_j c[k][j]
        let tape = Tape::new();
        let x = tape.param(&t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let c = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let loss = x.matmul(c).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 7.0, 3.0, 7.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Contract(_))));
    }

    #[test]
    fn separate_tapes_do_not_interfere() {
        let (t1, t2) = (Tape::new(), Tape::new());
        let a = t1.param(&t(&[2], &[1.0, 2.0]));
        let b = t2.param(&t(&[2], &[5.0, 7.0]));
        let la = a.mul(a).unwrap().sum();
        let lb = b.scale(3.0).sum();
        let gb = t2.backward(lb).unwrap();
        let ga = t1.backward(la).unwrap();
        assert_eq!(ga.get(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(gb.get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn finite_difference_examples() {
        let sq = |x: &Tensor| x.data().iter().map(|v| v * v).sum::<f64>();
        let g = finite_difference_grad(sq, &Tensor::full(&[1], 3.0), 1e-6);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let g = finite_difference_grad(|_| 4.2, &Tensor::full(&[3], 1.0), 1e-6);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let first_softmax = |x: &Tensor| {
            let tape = Tape::new();
            tape.constant(x).softmax(0).unwrap().value().data()[0]
        };
        let x = t(&[4], &[0.3, -1.2, 0.8, 1.9]);
        let tape = Tape::new();
        let v = tape.param(&x);
        let loss = v.softmax(0).unwrap().select(&[0]).unwrap().sum();
        let analytic = tape.backward(loss).unwrap().tensor(v);
        let numeric = finite_difference_grad(first_softmax, &x, 1e-6);
        assert!(crate::tensor::relative_error(analytic.data(), numeric.data()) < 1e-6);
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let x = t(&[2, 2], &[1.0, -2.0, 3.0, -4.0]);
        let before = x.clone();
        let tape = Tape::new();
        let v = tape.leaf(&x);
        let _ = v.relu().softmax(1).unwrap().sum();
        assert_eq!(x, before);
    }

    #[test]
    fn conv_shapes_and_padding() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 8, 8], 1.0));
        let w = tape.constant(&Tensor::zeros(&[4, 2, 3, 3]));
        let b = tape.constant(&Tensor::zeros(&[4]));
        assert_eq!(x.conv2d(w, b, 2).unwrap().shape(), vec![4, 4, 4]);
        let x7 = tape.constant(&Tensor::full(&[2, 7, 5], 1.0));
        assert_eq!(x7.conv2d(w, b, 2).unwrap().shape(), vec![4, 4, 3]);
        let bad = tape.constant(&Tensor::zeros(&[4, 3, 3, 3]));
        assert!(x.conv2d(bad, b, 1).is_err());
    }
}
