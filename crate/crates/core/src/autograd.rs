//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] records every operation in insertion order; [`Graph::backward`]
//! walks that list in exact reverse order, accumulating adjoints additively
//! into each node's inputs. Parameters enter a graph through [`Graph::param`]
//! and receive their gradients directly in their [`Param`] storage.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::Param;
use crate::tensor::{numel, Scalar, Tensor};

pub type NodeId = usize;

/// Batchnorm running-statistics momentum and default epsilon.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Epsilon under the square root in Euclidean distances so the gradient at
/// coincident points stays finite.
pub const DIST_EPS: f64 = 1e-12;

enum Op<T: Scalar> {
    Leaf,
    Param(Param<T>),
    Add(NodeId, NodeId, Option<Vec<usize>>),
    Sub(NodeId, NodeId, Option<Vec<usize>>),
    Mul(NodeId, NodeId, Option<Vec<usize>>),
    Scale(NodeId, T),
    Shift(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    /// `out[i] = a[map[i]]`; covers reshape-free permutes, transposes,
    /// row selection and slicing.
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    Concat(Vec<NodeId>, ConcatGeom),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Sum(NodeId, T),
    SumAxis(NodeId, AxisGeom, T),
    MaxAxis(NodeId, AxisGeom, Vec<usize>),
    Conv2d(Conv2dOp),
    AvgPool2d(NodeId, PoolGeom),
    MaxPool2d(NodeId, Vec<usize>),
    BatchNorm(BatchNormOp<T>),
    CrossEntropy(NodeId, Vec<usize>, Vec<T>),
}

#[derive(Clone, Copy, Debug)]
struct AxisGeom {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisGeom {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

struct ConcatGeom {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

#[derive(Clone, Copy)]
struct PoolGeom {
    n: usize,
    h: usize,
    w: usize,
    k: usize,
}

struct Conv2dOp {
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    geom: ConvGeom,
    batch: usize,
    out_c: usize,
}

struct BatchNormOp<T> {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    outer: usize,
    channels: usize,
    inner: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) | Op::MatMulNT(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Sum(a, _)
            | Op::SumAxis(a, _, _)
            | Op::MaxAxis(a, _, _)
            | Op::AvgPool2d(a, _)
            | Op::MaxPool2d(a, _)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv2d(c) => {
                let mut v = vec![c.x, c.w];
                v.extend(c.b);
                v
            }
            Op::BatchNorm(b) => vec![b.x, b.gamma, b.beta],
        }
    }
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; build one graph per
/// forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<usize, NodeId>>,
    leaf_grads: RefCell<HashMap<NodeId, Vec<T>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("training", &self.training)
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    if b.len() > a.len() {
        return Err(dim_err(format!("cannot broadcast {b:?} into {a:?}")));
    }
    let off = a.len() - b.len();
    let mut strides = vec![0; a.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        let (ad, bd) = (a[off + i], b[i]);
        if bd == ad {
            strides[off + i] = s;
        } else if bd != 1 {
            return Err(dim_err(format!("cannot broadcast {b:?} into {a:?}")));
        }
        s *= bd;
    }
    Ok(Some(strides))
}

fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let n = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut bi = 0usize;
    for ai in 0..n {
        f(ai, bi);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            bi += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            bi -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // keep the open interval (0, 1) even where the exact value rounds to a bound
    let hi = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], needs: &[bool], id: NodeId, f: impl FnOnce(&mut [T])) {
    if !needs[id] {
        return;
    }
    let n = grads.len();
    debug_assert!(id < n);
    let slot = &mut grads[id];
    if slot.is_none() {
        unreachable!("gradient buffers are preallocated");
    }
    f(slot.as_mut().unwrap());
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: batchnorm uses running statistics and random
    /// sequence orders are disabled.
    pub fn eval() -> Self {
        Self::build(false, 0)
    }

    /// Training-mode graph with its own random stream.
    pub fn train(seed: u64) -> Self {
        Self::build(true, seed)
    }

    fn build(training: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            leaf_grads: RefCell::new(HashMap::new()),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(p) => p.is_trainable(),
            other => other.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A constant: never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf)
    }

    /// A differentiable input leaf; its gradient is readable via [`Graph::grad`].
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        let v = self.push(t, Op::Leaf);
        self.nodes.borrow_mut()[v.id].requires_grad = true;
        v
    }

    /// Insert a parameter. Repeated calls with the same storage return the
    /// same node, so shared weights accumulate into one gradient.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.param_nodes.borrow().get(&p.key()) {
            return Var { graph: self, id };
        }
        let value = p.value();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Param(p.clone()), requires_grad: p.is_trainable() });
        let id = nodes.len() - 1;
        self.param_nodes.borrow_mut().insert(p.key(), id);
        Var { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Accumulated gradient of an input leaf, after one or more backward calls.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let shape = self.value(v.id).shape().to_vec();
        self.leaf_grads
            .borrow()
            .get(&v.id)
            .map(|g| Tensor::from_parts(shape, g.clone()))
    }

    /// Back-propagate from a scalar. Parameter gradients accumulate into their
    /// storage; input-leaf gradients accumulate into this graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let needs: Vec<bool> = nodes[..=loss.id].iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            // lazily allocate parent buffers
            for p in node.op.parents() {
                if needs[p] && grads[p].is_none() {
                    grads[p] = Some(vec![T::zero(); nodes[p].value.numel()]);
                }
            }
            match &node.op {
                Op::Leaf => {
                    let mut lg = self.leaf_grads.borrow_mut();
                    let slot = lg.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
                    for (s, &v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Param(p) => p.accumulate_grad(&g),
                op => backprop(op, &node.value, &g, &nodes, &needs, &mut grads),
            }
        }
        Ok(())
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        if parts.is_empty() {
            return Err(dim_err("concat of zero tensors"));
        }
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| self.value(p.id)).collect();
        let first = vals[0].shape().to_vec();
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        for v in &vals[1..] {
            let s = v.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err(format!("cannot concat {s:?} with {first:?} on axis {axis}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.iter().map(|p| p.id).collect(), ConcatGeom { outer, inner, lens }),
        ))
    }
}

fn backprop<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    nodes: &[Node<T>],
    needs: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |id: NodeId| -> &Tensor<T> { &nodes[id].value };
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b, map) | Op::Sub(a, b, map) => {
            let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
            accum(grads, needs, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            accum(grads, needs, *b, |gb| match map {
                None => gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y),
                Some(strides) => for_each_broadcast(val(*a).shape(), strides, |ai, bi| gb[bi] += sign * g[ai]),
            });
        }
        Op::Mul(a, b, map) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            match map {
                None => {
                    accum(grads, needs, *a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                    accum(grads, needs, *b, |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
                Some(strides) => {
                    let shape = val(*a).shape();
                    accum(grads, needs, *a, |ga| for_each_broadcast(shape, strides, |ai, bi| ga[ai] += g[ai] * bv[bi]));
                    accum(grads, needs, *b, |gb| for_each_broadcast(shape, strides, |ai, bi| gb[bi] += g[ai] * av[ai]));
                }
            }
        }
        Op::Scale(a, k) => accum(grads, needs, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *k * y)),
        Op::Shift(a) | Op::Reshape(a) => accum(grads, needs, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accum(grads, needs, *a, |ga| kernels::gemm_nt(m, n, k, g, bv.data(), ga));
            accum(grads, needs, *b, |gb| kernels::gemm_tn(k, m, n, av.data(), g, gb));
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            accum(grads, needs, *a, |ga| kernels::gemm_nn(m, n, k, g, bv.data(), ga));
            accum(grads, needs, *b, |gb| kernels::gemm_tn(n, m, k, g, av.data(), gb));
        }
        Op::Gather(a, map) => accum(grads, needs, *a, |ga| {
            for (i, &src) in map.iter().enumerate() {
                ga[src] += g[i];
            }
        }),
        Op::Concat(parts, geom) => {
            let total: usize = geom.lens.iter().sum();
            let mut off = 0;
            for (&p, &l) in parts.iter().zip(&geom.lens) {
                let block = l * geom.inner;
                accum(grads, needs, p, |gp| {
                    for o in 0..geom.outer {
                        let src = &g[o * total * geom.inner + off..][..block];
                        for (x, &y) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
                off += block;
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accum(grads, needs, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            })
        }
        Op::Tanh(a) => {
            let y = out.data();
            accum(grads, needs, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            })
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accum(grads, needs, *a, |ga| {
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Sqrt(a) => {
            let y = out.data();
            let half = T::from_f64(0.5);
            accum(grads, needs, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * half / y[i];
                }
            })
        }
        Op::Sum(a, scale) => {
            let s = g[0] * *scale;
            accum(grads, needs, *a, |ga| ga.iter_mut().for_each(|x| *x += s))
        }
        Op::SumAxis(a, geom, scale) => accum(grads, needs, *a, |ga| {
            for o in 0..geom.outer {
                for l in 0..geom.len {
                    let base = (o * geom.len + l) * geom.inner;
                    for i in 0..geom.inner {
                        ga[base + i] += g[o * geom.inner + i] * *scale;
                    }
                }
            }
        }),
        Op::MaxAxis(a, geom, arg) => accum(grads, needs, *a, |ga| {
            for o in 0..geom.outer {
                for i in 0..geom.inner {
                    let k = o * geom.inner + i;
                    ga[(o * geom.len + arg[k]) * geom.inner + i] += g[k];
                }
            }
        }),
        Op::Conv2d(c) => conv2d_backward(c, g, nodes, needs, grads),
        Op::AvgPool2d(a, pg) => {
            let (oh, ow) = (pg.h / pg.k, pg.w / pg.k);
            let inv = T::one() / T::from_usize(pg.k * pg.k);
            accum(grads, needs, *a, |ga| {
                for n in 0..pg.n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(n * oh + oy) * ow + ox] * inv;
                            for dy in 0..pg.k {
                                for dx in 0..pg.k {
                                    ga[(n * pg.h + oy * pg.k + dy) * pg.w + ox * pg.k + dx] += gv;
                                }
                            }
                        }
                    }
                }
            })
        }
        Op::MaxPool2d(a, arg) => accum(grads, needs, *a, |ga| {
            for (i, &src) in arg.iter().enumerate() {
                ga[src] += g[i];
            }
        }),
        Op::BatchNorm(bn) => batchnorm_backward(bn, g, nodes, needs, grads),
        Op::CrossEntropy(a, labels, probs) => {
            let n = labels.len();
            let k = probs.len() / n;
            let s = g[0] / T::from_usize(n);
            accum(grads, needs, *a, |ga| {
                for i in 0..n {
                    for j in 0..k {
                        let target = if j == labels[i] { T::one() } else { T::zero() };
                        ga[i * k + j] += s * (probs[i * k + j] - target);
                    }
                }
            })
        }
    }
}

fn conv2d_backward<T: Scalar>(
    c: &Conv2dOp,
    g: &[T],
    nodes: &[Node<T>],
    needs: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let geom = c.geom;
    let x = nodes[c.x].value.clone();
    let w = nodes[c.w].value.clone();
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_sz = geom.in_c * geom.h * geom.w;
    let out_sz = c.out_c * cols;

    if let Some(b) = c.b {
        accum(grads, needs, b, |gb| {
            for n in 0..c.batch {
                for oc in 0..c.out_c {
                    let s: f64 = g[n * out_sz + oc * cols..][..cols].iter().map(|v| v.as_f64()).sum();
                    gb[oc] += T::from_f64(s);
                }
            }
        });
    }
    if needs[c.w] {
        let partials: Vec<Vec<T>> = kernels::map_range(c.batch, |n| {
            let mut colbuf = vec![T::zero(); rows * cols];
            kernels::im2col(&geom, &x.data()[n * in_sz..(n + 1) * in_sz], &mut colbuf);
            let mut gw = vec![T::zero(); c.out_c * rows];
            kernels::gemm_nt(c.out_c, cols, rows, &g[n * out_sz..(n + 1) * out_sz], &colbuf, &mut gw);
            gw
        });
        accum(grads, needs, c.w, |gw| {
            for p in &partials {
                for (a, &b) in gw.iter_mut().zip(p) {
                    *a += b;
                }
            }
        });
    }
    accum(grads, needs, c.x, |gx| {
        kernels::for_each_chunk(gx, in_sz, |n, dx| {
            let mut dcols = vec![T::zero(); rows * cols];
            kernels::gemm_tn(rows, c.out_c, cols, w.data(), &g[n * out_sz..(n + 1) * out_sz], &mut dcols);
            kernels::col2im(&geom, &dcols, dx);
        });
    });
}

fn batchnorm_backward<T: Scalar>(
    bn: &BatchNormOp<T>,
    g: &[T],
    nodes: &[Node<T>],
    needs: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let gamma = nodes[bn.gamma].value.clone();
    let (outer, ch, inner) = (bn.outer, bn.channels, bn.inner);
    let m = outer * inner;
    let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;

    let mut sum_g = vec![0.0f64; ch];
    let mut sum_gx = vec![0.0f64; ch];
    for o in 0..outer {
        for c in 0..ch {
            for i in 0..inner {
                let k = idx(o, c, i);
                sum_g[c] += g[k].as_f64();
                sum_gx[c] += (g[k] * bn.xhat[k]).as_f64();
            }
        }
    }
    accum(grads, needs, bn.gamma, |gg| (0..ch).for_each(|c| gg[c] += T::from_f64(sum_gx[c])));
    accum(grads, needs, bn.beta, |gb| (0..ch).for_each(|c| gb[c] += T::from_f64(sum_g[c])));
    accum(grads, needs, bn.x, |gx| {
        let mf = T::from_usize(m);
        for c in 0..ch {
            let gc = gamma.data()[c];
            let inv = bn.inv_std[c];
            if bn.train {
                let (sg, sgx) = (T::from_f64(sum_g[c]), T::from_f64(sum_gx[c]));
                let k0 = gc * inv / mf;
                for o in 0..outer {
                    for i in 0..inner {
                        let k = idx(o, c, i);
                        gx[k] += k0 * (mf * g[k] - sg - bn.xhat[k] * sgx);
                    }
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = idx(o, c, i);
                        gx[k] += g[k] * gc * inv;
                    }
                }
            }
        }
    });
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g, T> {
        let v = self.value();
        let mut nodes = self.graph.nodes.borrow_mut();
        nodes.push(Node { value: v, op: Op::Leaf, requires_grad: false });
        Var { graph: self.graph, id: nodes.len() - 1 }
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let out = self.value().map(f);
        self.graph.push(out, op)
    }

    fn binary(&self, other: &Var<'g, T>, kind: u8, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let map = broadcast_strides(a.shape(), b.shape())?;
        let mut data = Vec::with_capacity(a.numel());
        match &map {
            None => data.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y))),
            Some(strides) => {
                let (ad, bd) = (a.data(), b.data());
                for_each_broadcast(a.shape(), strides, |ai, bi| data.push(f(ad[ai], bd[bi])));
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        let op = match kind {
            0 => Op::Add(self.id, other.id, map),
            1 => Op::Sub(self.id, other.id, map),
            _ => Op::Mul(self.id, other.id, map),
        };
        Ok(self.graph.push(out, op))
    }

    /// Elementwise sum; `other` may broadcast into `self` (right-aligned,
    /// extents equal or 1).
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, 0, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, 1, |x, y| x - y)
    }

    /// Hadamard product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, 2, |x, y| x * y)
    }

    pub fn scale(&self, k: f64) -> Var<'g, T> {
        let k = T::from_f64(k);
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'g, T> {
        let k = T::from_f64(k);
        self.unary(Op::Shift(self.id), |x| x + k)
    }

    pub fn square(&self) -> Var<'g, T> {
        self.mul(self).expect("same shape")
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    /// `self[m×k] · other[k×n]`
    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err(format!("matmul of {:?} by {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(self.id, other.id)))
    }

    /// `self[m×k] · other[n×k]ᵀ`
    pub fn matmul_t(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(dim_err(format!("matmul of {:?} by transpose of {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_nt(m, k, n, a.data(), b.data(), &mut c);
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], c), Op::MatMulNT(self.id, other.id)))
    }

    fn gather(&self, shape: Vec<usize>, map: Vec<usize>) -> Var<'g, T> {
        let a = self.value();
        let data = map.iter().map(|&i| a.data()[i]).collect();
        self.graph.push(Tensor::from_parts(shape, data), Op::Gather(self.id, map))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        if numel(shape) != a.numel() {
            return Err(dim_err(format!("cannot reshape {:?} into {:?}", a.shape(), shape)));
        }
        let t = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        Ok(self.graph.push(t, Op::Reshape(self.id)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        let rank = s.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(dim_err(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let mut in_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * s[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let mut map = Vec::with_capacity(a.numel());
        for_each_broadcast(&out_shape, &strides, |_, src| map.push(src));
        Ok(self.gather(out_shape, map))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Var<'g, T>> {
        if self.value().rank() != 2 {
            return Err(dim_err("t() needs a rank-2 tensor"));
        }
        self.permute(&[1, 0])
    }

    /// Select entries `indices` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(dim_err(format!("axis {axis} out of range for {s:?}")));
        }
        if indices.is_empty() {
            return Err(dim_err("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[axis]) {
            return Err(dim_err(format!("index {bad} out of range for axis {axis} of {s:?}")));
        }
        let geom = AxisGeom::of(s, axis);
        let mut map = Vec::with_capacity(geom.outer * indices.len() * geom.inner);
        for o in 0..geom.outer {
            for &l in indices {
                let base = (o * geom.len + l) * geom.inner;
                map.extend(base..base + geom.inner);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = indices.len();
        Ok(self.gather(shape, map))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err(format!("narrow({axis}, {start}, {len}) out of range for {s:?}")));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Sum of all elements (accumulated in f64), shape `[1]`.
    pub fn sum(&self) -> Var<'g, T> {
        let a = self.value();
        let s: f64 = a.data().iter().map(|v| v.as_f64()).sum();
        self.graph.push(Tensor::scalar(T::from_f64(s)), Op::Sum(self.id, T::one()))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let a = self.value();
        let n = a.numel() as f64;
        let s: f64 = a.data().iter().map(|v| v.as_f64()).sum();
        self.graph.push(Tensor::scalar(T::from_f64(s / n)), Op::Sum(self.id, T::from_f64(1.0 / n)))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(dim_err(format!("axis {axis} out of range for {s:?}")));
        }
        let geom = AxisGeom::of(s, axis);
        let scale = if mean { 1.0 / geom.len as f64 } else { 1.0 };
        let mut data = Vec::with_capacity(geom.outer * geom.inner);
        let mut acc = vec![0.0f64; geom.inner];
        for o in 0..geom.outer {
            acc.iter_mut().for_each(|v| *v = 0.0);
            // ascending index order along the reduced axis
            for l in 0..geom.len {
                let row = &a.data()[(o * geom.len + l) * geom.inner..][..geom.inner];
                for (x, &v) in acc.iter_mut().zip(row) {
                    *x += v.as_f64();
                }
            }
            data.extend(acc.iter().map(|&v| T::from_f64(v * scale)));
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::SumAxis(self.id, geom, T::from_f64(scale))))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, true)
    }

    /// Maximum over `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(dim_err(format!("axis {axis} out of range for {s:?}")));
        }
        let geom = AxisGeom::of(s, axis);
        let mut data = Vec::with_capacity(geom.outer * geom.inner);
        let mut arg = Vec::with_capacity(geom.outer * geom.inner);
        for o in 0..geom.outer {
            for i in 0..geom.inner {
                let mut best = 0;
                let mut bv = a.data()[o * geom.len * geom.inner + i];
                for l in 1..geom.len {
                    let v = a.data()[(o * geom.len + l) * geom.inner + i];
                    if v > bv {
                        bv = v;
                        best = l;
                    }
                }
                data.push(bv);
                arg.push(best);
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::MaxAxis(self.id, geom, arg)))
    }

    /// Cross-correlation of `self[N×C×H×W]` with `weight[O×C×kh×kw]`.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(dim_err(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).ok_or_else(|| {
            dim_err(format!("kernel {}x{} does not fit input {xs:?} with padding {pad}", ws[2], ws[3]))
        })?;
        let (batch, out_c) = (xs[0], ws[0]);
        let bval = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [out_c] {
                    return Err(dim_err(format!("conv2d bias {:?} for {out_c} outputs", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_sz = geom.in_c * geom.h * geom.w;
        let out_sz = out_c * cols;
        let mut out = vec![T::zero(); batch * out_sz];
        kernels::for_each_chunk(&mut out, out_sz, |n, y| {
            let mut colbuf = vec![T::zero(); rows * cols];
            kernels::im2col(&geom, &x.data()[n * in_sz..(n + 1) * in_sz], &mut colbuf);
            kernels::gemm_nn(out_c, rows, cols, w.data(), &colbuf, y);
            if let Some(b) = &bval {
                for oc in 0..out_c {
                    let bv = b.data()[oc];
                    y[oc * cols..(oc + 1) * cols].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
        let t = Tensor::from_parts(vec![batch, out_c, geom.oh, geom.ow], out);
        Ok(self.graph.push(
            t,
            Op::Conv2d(Conv2dOp { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom, batch, out_c }),
        ))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'g, T>> {
        let (shape, pg) = self.pool_geom(k)?;
        let a = self.value();
        let (oh, ow) = (pg.h / k, pg.w / k);
        let mut data = Vec::with_capacity(pg.n * oh * ow);
        let inv = 1.0 / (k * k) as f64;
        for n in 0..pg.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += a.data()[(n * pg.h + oy * k + dy) * pg.w + ox * k + dx].as_f64();
                        }
                    }
                    data.push(T::from_f64(s * inv));
                }
            }
        }
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::AvgPool2d(self.id, pg)))
    }

    /// Non-overlapping `k×k` max pooling; ties resolve to the first maximal
    /// element in row-major window order.
    pub fn max_pool2d(&self, k: usize) -> Result<Var<'g, T>> {
        let (shape, pg) = self.pool_geom(k)?;
        let a = self.value();
        let (oh, ow) = (pg.h / k, pg.w / k);
        let mut data = Vec::with_capacity(pg.n * oh * ow);
        let mut arg = Vec::with_capacity(pg.n * oh * ow);
        for n in 0..pg.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (n * pg.h + oy * k) * pg.w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (n * pg.h + oy * k + dy) * pg.w + ox * k + dx;
                            if a.data()[i] > a.data()[best] {
                                best = i;
                            }
                        }
                    }
                    data.push(a.data()[best]);
                    arg.push(best);
                }
            }
        }
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::MaxPool2d(self.id, arg)))
    }

    fn pool_geom(&self, k: usize) -> Result<(Vec<usize>, PoolGeom)> {
        let s = self.shape();
        if s.len() < 2 || k == 0 {
            return Err(dim_err(format!("empty pooling window {k} for {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % k != 0 || w % k != 0 {
            return Err(dim_err(format!("pool window {k} does not divide {h}x{w}")));
        }
        let n = s[..s.len() - 2].iter().product();
        let mut out = s.clone();
        let r = out.len();
        out[r - 2] = h / k;
        out[r - 1] = w / k;
        Ok((out, PoolGeom { n, h, w, k }))
    }

    /// Global average over the trailing spatial axes of `[N, C, H, W]`,
    /// giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err(format!("global_avg_pool needs [N,C,H,W], got {s:?}")));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`. In training graphs
    /// the batch statistics are used and the running buffers updated; in
    /// evaluation graphs the running buffers are used.
    pub fn batch_norm(
        &self,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        running_mean: &Param<T>,
        running_var: &Param<T>,
        eps: f64,
    ) -> Result<Var<'g, T>> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batchnorm epsilon must be positive, got {eps}")));
        }
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(dim_err(format!("batch_norm needs [N, C, ...], got {s:?}")));
        }
        let ch = s[1];
        if gamma.shape() != [ch] || beta.shape() != [ch] || running_mean.shape() != [ch] {
            return Err(dim_err(format!("batch_norm affine parameters do not match {ch} channels")));
        }
        let outer = s[0];
        let inner: usize = s[2..].iter().product();
        let m = outer * inner;
        let train = self.graph.training;
        if train && m < 2 {
            return Err(dim_err(format!("batch_norm in training mode needs more than one value per channel, got {s:?}")));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0; ch];
            let mut sq = vec![0.0; ch];
            for o in 0..outer {
                for c in 0..ch {
                    for v in &x.data()[(o * ch + c) * inner..][..inner] {
                        mean[c] += v.as_f64();
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for o in 0..outer {
                for c in 0..ch {
                    for v in &x.data()[(o * ch + c) * inner..][..inner] {
                        let d = v.as_f64() - mean[c];
                        sq[c] += d * d;
                    }
                }
            }
            let var: Vec<f64> = sq.iter().map(|v| v / m as f64).collect();
            let unbiased = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let mom = T::from_f64(BN_MOMENTUM);
            running_mean.update(|rm, _| {
                for c in 0..ch {
                    rm[c] = (T::one() - mom) * rm[c] + mom * T::from_f64(mean[c]);
                }
            });
            running_var.update(|rv, _| {
                for c in 0..ch {
                    rv[c] = (T::one() - mom) * rv[c] + mom * T::from_f64(var[c] * unbiased);
                }
            });
            (mean, var)
        } else {
            (
                running_mean.value().to_f64_vec(),
                running_var.value().to_f64_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for o in 0..outer {
            for c in 0..ch {
                let mu = T::from_f64(mean[c]);
                for &v in &x.data()[(o * ch + c) * inner..][..inner] {
                    let h = (v - mu) * inv_std[c];
                    xhat.push(h);
                    out.push(gv.data()[c] * h + bv.data()[c]);
                }
            }
        }
        let op = BatchNormOp {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            outer,
            channels: ch,
            inner,
            xhat,
            inv_std,
            train,
        };
        Ok(self.graph.push(Tensor::from_parts(s.to_vec(), out), Op::BatchNorm(op)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// logits `[n×k]`, via log-sum-exp.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Contract(format!("label {l} of sample {i} outside [0, {k})")));
        }
        let mut probs = Vec::with_capacity(a.numel());
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = a.row(i).iter().map(|v| v.as_f64()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| T::from_f64((v - lse).exp())));
        }
        let loss = T::from_f64(total / labels.len() as f64);
        Ok(self.graph.push(Tensor::scalar(loss), Op::CrossEntropy(self.id, labels.to_vec(), probs)))
    }

    /// Row-wise Euclidean distance between `self[n×D]` and `other[n×D]`,
    /// shape `[n]`; `sqrt(Σ(a−b)² + DIST_EPS)`.
    pub fn row_distance(&self, other: &Var<'g, T>, squared: bool) -> Result<Var<'g, T>> {
        let d2 = self.sub(other)?.square().sum_axis(1)?;
        if squared {
            Ok(d2)
        } else {
            Ok(d2.add_scalar(DIST_EPS).sqrt())
        }
    }
}
