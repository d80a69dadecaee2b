//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are
//! computed eagerly; [`Graph::backward`] walks the record once in reverse
//! order and accumulates gradients into every node that depends on a
//! trainable leaf. A graph is single use: run the forward pass, call
//! `backward` once, read the gradients, drop it.
//!
//! ```
//! use deepmil::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::vector(&[1.0, -2.0, 3.0]).unwrap());
//! let loss = g.sum(x).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Clamp {
        input: NodeId,
        lo: T,
        hi: T,
    },
    Affine {
        input: NodeId,
        scale: T,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    SortDesc {
        input: NodeId,
        perm: Vec<usize>,
    },
    L1Norm(NodeId),
    L2NormSq(Vec<NodeId>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::SortDesc { .. } => "sort_desc",
            Op::L1Norm(_) => "l1_norm",
            Op::L2NormSq(_) => "l2_norm_sq",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Constant leaf (images, targets).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss passed to [`Graph::backward`] with respect to
    /// `id`, or `None` if backward has not run or `id` does not influence it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Permutation recorded by a [`Graph::sort_desc`] node.
    pub fn permutation(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::SortDesc { perm, .. } => Some(perm),
            _ => None,
        }
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(op, format!("operands {da:?} and {db:?} differ")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = tensor::conv_geometry(x, k, b, stride, pad)?;
        let out = tensor::conv2d_forward(&geom, x.data(), k.data(), b.data());
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        )
    }

    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = tensor::maxpool2d_forward(self.value(input), k, stride)?;
        self.push(out, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Natural log. Every element must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v.partial_cmp(&T::ZERO) != Some(core::cmp::Ordering::Greater))
        {
            return Err(Error::LogDomain { value: bad.to_f64() });
        }
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log(x), &[x])
    }

    /// Elementwise clamp to `[lo, hi]`; clamped elements pass no gradient.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { input: x, lo, hi }, &[x])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { input: x, scale }, &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -T::ONE, T::ZERO)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.affine(x, c, T::ZERO)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -T::ONE, T::ONE)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = sequential_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = sequential_sum(v.data()) / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(dims)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Rank-1 tensor of the selected flat elements of `x`.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", v.len()),
            ));
        }
        let out = Tensor::new(vec![indices.len()], indices.iter().map(|&i| v.data()[i]).collect())?;
        self.push(
            out,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Contiguous slice `start..end` of a rank-1 tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(x, &idx)
    }

    /// Descending sort of a rank-1 tensor. Ties keep ascending original
    /// index. The backward pass routes gradients through the recorded
    /// permutation unchanged.
    pub fn sort_desc(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::shape(
                "sort_desc",
                format!("expected a rank-1 tensor, got {:?}", v.dims()),
            ));
        }
        let perm = descending_permutation(v.data());
        let sorted = perm.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(vec![perm.len()], sorted)?;
        self.push(out, Op::SortDesc { input: x, perm }, &[x])
    }

    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v.abs();
        }
        self.push(Tensor::scalar(s), Op::L1Norm(x), &[x])
    }

    /// Sum of squares over every element of every listed tensor.
    pub fn l2_norm_sq(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut s = T::ZERO;
        for &x in xs {
            for &v in self.value(x).data() {
                s += v * v;
            }
        }
        self.push(Tensor::scalar(s), Op::L2NormSq(xs.to_vec()), xs)
    }

    /// Hash of every data-dependent branch taken during the forward pass:
    /// relu signs, pooling winners, sort permutations and clamp activity.
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the loss surface.
    pub fn branch_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        h.write(u64::from(v > T::ZERO));
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for &v in self.value(*input).data() {
                        h.write(u64::from(v < *lo) | (u64::from(v > *hi) << 1));
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&i| h.write(i as u64)),
                Op::SortDesc { perm, .. } => perm.iter().for_each(|&i| h.write(i as u64)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from the scalar `loss`. Can run once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(loss.0));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::ONE));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let value = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let (di, dk, db) = tensor::conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        g.data(),
                        need_input,
                    );
                    if let Some(di) = di {
                        self.accumulate(&mut grads, *input, di);
                    }
                    self.accumulate(&mut grads, *kernel, dk);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut di = vec![T::ZERO; self.value(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        di[src] += gv;
                    }
                    self.accumulate(&mut grads, *input, di);
                }
                Op::Relu(x) => {
                    let di = zip_map(
                        self.value(*x).data(),
                        g.data(),
                        |v, gv| {
                            if v > T::ZERO {
                                gv
                            } else {
                                T::ZERO
                            }
                        },
                    );
                    self.accumulate(&mut grads, *x, di);
                }
                Op::Sigmoid(x) => {
                    let di = zip_map(value.data(), g.data(), |s, gv| gv * s * (T::ONE - s));
                    self.accumulate(&mut grads, *x, di);
                }
                Op::Log(x) => {
                    let di = zip_map(self.value(*x).data(), g.data(), |v, gv| gv / v);
                    self.accumulate(&mut grads, *x, di);
                }
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let di = zip_map(self.value(*input).data(), g.data(), |v, gv| {
                        if v < lo || v > hi {
                            T::ZERO
                        } else {
                            gv
                        }
                    });
                    self.accumulate(&mut grads, *input, di);
                }
                Op::Affine { input, scale, .. } => {
                    let s = *scale;
                    let di = g.data().iter().map(|&gv| gv * s).collect();
                    self.accumulate(&mut grads, *input, di);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.data().to_vec());
                }
                Op::Mul(a, b) => {
                    let da = zip_map(self.value(*b).data(), g.data(), |v, gv| gv * v);
                    let db = zip_map(self.value(*a).data(), g.data(), |v, gv| gv * v);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let di = vec![gv; self.value(*x).len()];
                    self.accumulate(&mut grads, *x, di);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gv = g.data()[0] / T::from_f64(n as f64);
                    self.accumulate(&mut grads, *x, vec![gv; n]);
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, g.data().to_vec());
                }
                Op::Gather { input, indices } => {
                    let mut di = vec![T::ZERO; self.value(*input).len()];
                    for (&src, &gv) in indices.iter().zip(g.data()) {
                        di[src] += gv;
                    }
                    self.accumulate(&mut grads, *input, di);
                }
                Op::SortDesc { input, perm } => {
                    let mut di = vec![T::ZERO; perm.len()];
                    for (&src, &gv) in perm.iter().zip(g.data()) {
                        di[src] = gv;
                    }
                    self.accumulate(&mut grads, *input, di);
                }
                Op::L1Norm(x) => {
                    let gv = g.data()[0];
                    let di = self.value(*x).data().iter().map(|&v| gv * sign(v)).collect();
                    self.accumulate(&mut grads, *x, di);
                }
                Op::L2NormSq(xs) => {
                    let two_g = g.data()[0] * T::from_f64(2.0);
                    for &x in xs {
                        let di = self.value(x).data().iter().map(|&v| two_g * v).collect();
                        self.accumulate(&mut grads, x, di);
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: NodeId, delta: Vec<T>) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot =
                    Some(Tensor::new(node.value.dims().to_vec(), delta).expect("gradient matches its node's shape"));
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

fn sequential_sum<T: Real>(xs: &[T]) -> T {
    let mut s = T::ZERO;
    for &v in xs {
        s += v;
    }
    s
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Indices that sort `values` in non-increasing order, ties by ascending
/// index.
pub fn descending_permutation<T: Real>(values: &[T]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps the original order among equal keys
    perm.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(core::cmp::Ordering::Equal));
    perm
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
