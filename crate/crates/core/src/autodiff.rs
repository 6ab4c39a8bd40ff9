//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap copyable handle to a recorded node. After the forward pass,
//! [`Tape::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every tracked node. The tape is dropped afterwards; the next forward
//! pass records a new one.
//!
//! Broadcasting is deliberately absent. Besides scalar-with-tensor ops, the
//! only mixed-shape ops are the explicit ones the networks need
//! ([`Var::add_row_bias`], [`Var::film`], convolution bias).

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{numel, Real, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, k: usize },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Relu(usize),
    Silu(usize),
    ConcatChannels(Vec<usize>),
    L2Norm(usize),
    NormalizeRows { x: usize, norms: Vec<T> },
    Reshape(usize),
    AvgPool2(usize),
    Upsample2(usize),
    GroupNorm { x: usize, groups: usize, rstd: Vec<T> },
    Film { x: usize, scale: usize, shift: usize },
    EmbeddingBagMean { table: usize, bags: Vec<Vec<usize>> },
    SpatialMean(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn bad_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; it is tracked iff the tensor requires a gradient.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a tracked leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records an untracked leaf, taking ownership of the data.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if root.tracked {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        let keep = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        Ok(Gradients { grads: keep, shapes })
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get_slice(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get_slice(v)
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.to_vec()))
    }
}

fn accum<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].tracked {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(buf);
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, |d| add_into(d, g));
            accum(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, |d| add_into(d, g));
            accum(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accum(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * bv[i];
                }
            });
            accum(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => {
            accum(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s)
            });
        }
        Op::AddScalar(a) => accum(nodes, grads, *a, |d| add_into(d, g)),
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            // dA = G · Bᵀ, dB = Aᵀ · G
            if nodes[*a].tracked {
                let bt = kernels::transpose(k, n, &nodes[*b].value);
                accum(nodes, grads, *a, |d| kernels::gemm(m, n, k, g, &bt, d));
            }
            if nodes[*b].tracked {
                let at = kernels::transpose(m, k, &nodes[*a].value);
                accum(nodes, grads, *b, |d| kernels::gemm(k, m, n, &at, g, d));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let gt = kernels::transpose(c, r, g);
            accum(nodes, grads, *a, |d| add_into(d, &gt));
        }
        Op::AddRowBias(x, b) => {
            accum(nodes, grads, *x, |d| add_into(d, g));
            let cols = nodes[*b].value.len();
            accum(nodes, grads, *b, |d| {
                for row in g.chunks_exact(cols) {
                    add_into(d, row);
                }
            });
        }
        Op::Conv2d { x, w, b, k } => conv2d_backward(nodes, grads, g, *x, *w, *b, *k, &node.shape),
        Op::Sum(a) => accum(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
        Op::Mean(a) => {
            let s = g[0] / T::lit(nodes[*a].value.len() as f64);
            accum(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + s));
        }
        Op::Square(a) => {
            let av = &nodes[*a].value;
            let two = T::lit(2.0);
            accum(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + two * av[i] * g[i];
                }
            });
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            accum(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    if av[i] > T::zero() {
                        d[i] = d[i] + g[i];
                    }
                }
            });
        }
        Op::Silu(a) => {
            let av = &nodes[*a].value;
            accum(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    let s = sigmoid(av[i]);
                    d[i] = d[i] + g[i] * s * (T::one() + av[i] * (T::one() - s));
                }
            });
        }
        Op::ConcatChannels(parts) => {
            let (n, hw) = (node.shape[0], node.shape[2] * node.shape[3]);
            let total_c = node.shape[1];
            let mut c0 = 0;
            for &p in parts {
                let pc = nodes[p].shape[1];
                accum(nodes, grads, p, |d| {
                    for b in 0..n {
                        let src = &g[(b * total_c + c0) * hw..(b * total_c + c0 + pc) * hw];
                        add_into(&mut d[b * pc * hw..(b + 1) * pc * hw], src);
                    }
                });
                c0 += pc;
            }
        }
        Op::L2Norm(a) => {
            let av = &nodes[*a].value;
            let norm = node.value[0];
            if norm > T::zero() {
                let s = g[0] / norm;
                accum(nodes, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + s * av[i];
                    }
                });
            }
        }
        Op::NormalizeRows { x, norms } => {
            let cols = node.shape[1];
            let y = &node.value;
            accum(nodes, grads, *x, |d| {
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = d[r * cols + c] + (gr[c] - yr[c] * proj) / norm;
                    }
                }
            });
        }
        Op::Reshape(a) => accum(nodes, grads, *a, |d| add_into(d, g)),
        Op::AvgPool2(a) => {
            let s = &nodes[*a].shape;
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let q = T::lit(0.25);
            accum(nodes, grads, *a, |d| {
                for p in 0..nc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g[(p * oh + y) * ow + x] * q;
                            let base = p * h * w + 2 * y * w + 2 * x;
                            d[base] = d[base] + gv;
                            d[base + 1] = d[base + 1] + gv;
                            d[base + w] = d[base + w] + gv;
                            d[base + w + 1] = d[base + w + 1] + gv;
                        }
                    }
                }
            });
        }
        Op::Upsample2(a) => {
            let s = &nodes[*a].shape;
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            accum(nodes, grads, *a, |d| {
                for p in 0..nc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let di = p * h * w + (y / 2) * w + x / 2;
                            d[di] = d[di] + g[(p * oh + y) * ow + x];
                        }
                    }
                }
            });
        }
        Op::GroupNorm { x, groups, rstd } => {
            let s = &node.shape;
            let per = s[1] / groups * s[2] * s[3];
            let y = &node.value;
            let cnt = T::lit(per as f64);
            accum(nodes, grads, *x, |d| {
                for (gi, &r) in rstd.iter().enumerate() {
                    let range = gi * per..(gi + 1) * per;
                    let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                    let mean_g: T = gr.iter().copied().sum::<T>() / cnt;
                    let mean_gy: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / cnt;
                    for (j, i) in range.enumerate() {
                        d[i] = d[i] + r * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            });
        }
        Op::Film { x, scale, shift } => {
            let s = &node.shape;
            let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
            let (xv, sv) = (&nodes[*x].value, &nodes[*scale].value);
            accum(nodes, grads, *x, |d| {
                for p in 0..nc {
                    let f = T::one() + sv[p];
                    for i in p * hw..(p + 1) * hw {
                        d[i] = d[i] + g[i] * f;
                    }
                }
            });
            accum(nodes, grads, *scale, |d| {
                for p in 0..nc {
                    let r = p * hw..(p + 1) * hw;
                    d[p] = d[p] + kernels::dot(&g[r.clone()], &xv[r]);
                }
            });
            accum(nodes, grads, *shift, |d| {
                for p in 0..nc {
                    d[p] = d[p] + g[p * hw..(p + 1) * hw].iter().copied().sum::<T>();
                }
            });
        }
        Op::EmbeddingBagMean { table, bags } => {
            let dim = node.shape[1];
            accum(nodes, grads, *table, |d| {
                for (b, bag) in bags.iter().enumerate() {
                    let inv = T::one() / T::lit(bag.len() as f64);
                    let gr = &g[b * dim..(b + 1) * dim];
                    for &tok in bag {
                        let row = &mut d[tok * dim..(tok + 1) * dim];
                        for c in 0..dim {
                            row[c] = row[c] + gr[c] * inv;
                        }
                    }
                }
            });
        }
        Op::SpatialMean(a) => {
            let s = &nodes[*a].shape;
            let hw = s[2] * s[3];
            let inv = T::one() / T::lit(hw as f64);
            accum(nodes, grads, *a, |d| {
                for (p, &gv) in g.iter().enumerate() {
                    let v = gv * inv;
                    d[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = *d + v);
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    x: usize,
    w: usize,
    b: usize,
    k: usize,
    out_shape: &[usize],
) {
    let xs = &nodes[x].shape;
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let o = out_shape[1];
    let hw = h * wd;
    let ckk = c * k * k;
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    accum(nodes, grads, b, |d| {
        for bi in 0..n {
            for oc in 0..o {
                let r = (bi * o + oc) * hw;
                d[oc] = d[oc] + g[r..r + hw].iter().copied().sum::<T>();
            }
        }
    });
    if nodes[w].tracked {
        let mut dw = vec![T::zero(); o * ckk];
        for bi in 0..n {
            let cols = kernels::im2col(&xv[bi * c * hw..(bi + 1) * c * hw], c, h, wd, k);
            let cols_t = kernels::transpose(ckk, hw, &cols);
            kernels::gemm(o, hw, ckk, &g[bi * o * hw..(bi + 1) * o * hw], &cols_t, &mut dw);
        }
        accum(nodes, grads, w, |d| add_into(d, &dw));
    }
    if nodes[x].tracked {
        let wt = kernels::transpose(o, ckk, wv);
        accum(nodes, grads, x, |d| {
            for bi in 0..n {
                let mut dcols = vec![T::zero(); ckk * hw];
                kernels::gemm(ckk, o, hw, &wt, &g[bi * o * hw..(bi + 1) * o * hw], &mut dcols);
                kernels::col2im(&dcols, c, h, wd, k, &mut d[bi * c * hw..(bi + 1) * c * hw]);
            }
        });
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.tape.node(self.id);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn item(&self) -> T {
        let n = self.tape.node(self.id);
        assert_eq!(n.value.len(), 1, "item() on non-scalar {:?}", n.shape);
        n.value[0]
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.node(self.id).tracked
    }

    fn tracked_any(&self, ids: &[usize]) -> bool {
        let nodes = self.tape.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (shape, value) = {
            let (a, b) = (self.tape.node(self.id), self.tape.node(other.id));
            if a.shape != b.shape {
                return Err(mismatch(name, &a.shape, &b.shape));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        let tracked = self.tracked_any(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, tracked))
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let (shape, value, tracked) = {
            let a = self.tape.node(self.id);
            (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect(), a.tracked)
        };
        self.tape.push(shape, value, op, tracked)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product; also the mask product `m ⊙ x`.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, s), |a| a * s)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(self.id), |a| a + s)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |a| a * a)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |a| a.max(T::zero()))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Op::Silu(self.id), |a| a * sigmoid(a))
    }

    fn reduce(self, op: Op<T>, f: impl Fn(&[T]) -> T) -> Var<'t, T> {
        let (v, tracked) = {
            let a = self.tape.node(self.id);
            (f(&a.value), a.tracked)
        };
        self.tape.push(vec![1], vec![v], op, tracked)
    }

    pub fn sum(self) -> Var<'t, T> {
        self.reduce(Op::Sum(self.id), |v| v.iter().copied().sum())
    }

    pub fn mean(self) -> Var<'t, T> {
        self.reduce(Op::Mean(self.id), |v| {
            v.iter().copied().sum::<T>() / T::lit(v.len() as f64)
        })
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(self) -> Var<'t, T> {
        self.reduce(Op::L2Norm(self.id), |v| {
            v.iter().map(|&x| x * x).sum::<T>().sqrt()
        })
    }

    /// Mean squared difference, the noise-prediction objective.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.sub(target)?.square().mean())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (value, tracked, old) = {
            let a = self.tape.node(self.id);
            (a.value.clone(), a.tracked, a.shape.clone())
        };
        if numel(shape) != value.len() || shape.contains(&0) {
            return Err(mismatch("reshape", &old, shape));
        }
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), tracked))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (shape, value) = {
            let (a, b) = (self.tape.node(self.id), self.tape.node(other.id));
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![T::zero(); m * n];
            kernels::gemm(m, k, n, &a.value, &b.value, &mut out);
            (vec![m, n], out)
        };
        let tracked = self.tracked_any(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (shape, value, tracked) = {
            let a = self.tape.node(self.id);
            if a.shape.len() != 2 {
                return Err(bad_shape("transpose", &a.shape, "expected rank 2"));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            (vec![c, r], kernels::transpose(r, c, &a.value), a.tracked)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), tracked))
    }

    /// `x[n, d] + b[d]` row-wise.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (shape, value) = {
            let (x, b) = (self.tape.node(self.id), self.tape.node(bias.id));
            if x.shape.len() != 2 || b.shape != [x.shape[1]] {
                return Err(mismatch("add_row_bias", &x.shape, &b.shape));
            }
            let d = x.shape[1];
            let v = x
                .value
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.value[i % d])
                .collect();
            (x.shape.clone(), v)
        };
        let tracked = self.tracked_any(&[self.id, bias.id]);
        Ok(self.tape.push(shape, value, Op::AddRowBias(self.id, bias.id), tracked))
    }

    /// `x[n, i] · w[i, o] + b[o]`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(w)?.add_row_bias(b)
    }

    /// Stride-1 convolution with zero padding `k / 2` (odd `k`), so spatial
    /// size is preserved. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        self.same_tape(&b);
        let (shape, value, k) = {
            let (x, wn, bn) = (
                self.tape.node(self.id),
                self.tape.node(w.id),
                self.tape.node(b.id),
            );
            if x.shape.len() != 4 {
                return Err(bad_shape("conv2d", &x.shape, "input must be rank 4 (N, C, H, W)"));
            }
            if wn.shape.len() != 4
                || wn.shape[1] != x.shape[1]
                || wn.shape[2] != wn.shape[3]
                || wn.shape[2] % 2 == 0
            {
                return Err(mismatch("conv2d", &x.shape, &wn.shape));
            }
            if bn.shape != [wn.shape[0]] {
                return Err(mismatch("conv2d bias", &wn.shape, &bn.shape));
            }
            let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (o, k) = (wn.shape[0], wn.shape[2]);
            let hw = h * wd;
            let mut out = vec![T::zero(); n * o * hw];
            for bi in 0..n {
                let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
                for oc in 0..o {
                    dst[oc * hw..(oc + 1) * hw].fill(bn.value[oc]);
                }
                let src = &x.value[bi * c * hw..(bi + 1) * c * hw];
                if k == 1 {
                    kernels::gemm(o, c, hw, &wn.value, src, dst);
                } else {
                    let cols = kernels::im2col(src, c, h, wd, k);
                    kernels::gemm(o, c * k * k, hw, &wn.value, &cols, dst);
                }
            }
            (vec![n, o, h, wd], out, k)
        };
        let tracked = self.tracked_any(&[self.id, w.id, b.id]);
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.id,
            k,
        };
        Ok(self.tape.push(shape, value, op, tracked))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::EmptyBatch("concat_channels"))?;
        let tape = first.tape;
        let (shape, value, tracked) = {
            let nodes = tape.nodes.borrow();
            let s0 = &nodes[first.id].shape;
            if s0.len() != 4 {
                return Err(bad_shape("concat_channels", s0, "expected rank 4"));
            }
            let (n, h, w) = (s0[0], s0[2], s0[3]);
            let mut total = 0;
            for p in parts {
                first.same_tape(p);
                let s = &nodes[p.id].shape;
                if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                    return Err(mismatch("concat_channels", s0, s));
                }
                total += s[1];
            }
            let hw = h * w;
            let mut out = Vec::with_capacity(n * total * hw);
            for b in 0..n {
                for p in parts {
                    let pn = &nodes[p.id];
                    let pc = pn.shape[1];
                    out.extend_from_slice(&pn.value[b * pc * hw..(b + 1) * pc * hw]);
                }
            }
            let tracked = parts.iter().any(|p| nodes[p.id].tracked);
            (vec![n, total, h, w], out, tracked)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, value, Op::ConcatChannels(ids), tracked))
    }

    /// Scales each row of `[n, d]` to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t, T>> {
        let eps = T::lit(1e-12);
        let (shape, value, norms, tracked) = {
            let a = self.tape.node(self.id);
            if a.shape.len() != 2 {
                return Err(bad_shape("normalize_rows", &a.shape, "expected rank 2"));
            }
            let d = a.shape[1];
            let mut out = a.value.clone();
            let mut norms = Vec::with_capacity(a.shape[0]);
            for row in out.chunks_exact_mut(d) {
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v = *v / nrm);
                norms.push(nrm);
            }
            (a.shape.clone(), out, norms, a.tracked)
        };
        let op = Op::NormalizeRows { x: self.id, norms };
        Ok(self.tape.push(shape, value, op, tracked))
    }

    fn spatial4(&self, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(bad_shape(op, &s, "expected rank 4"));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let [n, c, h, w] = self.spatial4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(bad_shape("avg_pool2", &[n, c, h, w], "spatial dims must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let (value, tracked) = {
            let a = self.tape.node(self.id);
            let q = T::lit(0.25);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for p in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        let base = p * h * w + 2 * y * w + 2 * x;
                        let v = a.value[base] + a.value[base + 1] + a.value[base + w] + a.value[base + w + 1];
                        out.push(v * q);
                    }
                }
            }
            (out, a.tracked)
        };
        Ok(self.tape.push(vec![n, c, oh, ow], value, Op::AvgPool2(self.id), tracked))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let [n, c, h, w] = self.spatial4("upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let (value, tracked) = {
            let a = self.tape.node(self.id);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for p in 0..n * c {
                for y in 0..oh {
                    let row = &a.value[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                    for x in 0..ow {
                        out.push(row[x / 2]);
                    }
                }
            }
            (out, a.tracked)
        };
        Ok(self.tape.push(vec![n, c, oh, ow], value, Op::Upsample2(self.id), tracked))
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(self, groups: usize) -> Result<Var<'t, T>> {
        let [n, c, h, w] = self.spatial4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(bad_shape("group_norm", &[n, c, h, w], format!("{groups} groups")));
        }
        let eps = T::lit(1e-5);
        let per = c / groups * h * w;
        let cnt = T::lit(per as f64);
        let (value, rstd, tracked) = {
            let a = self.tape.node(self.id);
            let mut out = vec![T::zero(); a.value.len()];
            let mut rstd = Vec::with_capacity(n * groups);
            for gi in 0..n * groups {
                let r = gi * per..(gi + 1) * per;
                let xs = &a.value[r.clone()];
                let mean = xs.iter().copied().sum::<T>() / cnt;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
                let rs = T::one() / (var + eps).sqrt();
                for (o, &v) in out[r].iter_mut().zip(xs) {
                    *o = (v - mean) * rs;
                }
                rstd.push(rs);
            }
            (out, rstd, a.tracked)
        };
        let op = Op::GroupNorm {
            x: self.id,
            groups,
            rstd,
        };
        Ok(self.tape.push(vec![n, c, h, w], value, op, tracked))
    }

    /// Feature-wise modulation `x · (1 + scale[n, c]) + shift[n, c]`.
    pub fn film(self, scale: Var<'t, T>, shift: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&scale);
        self.same_tape(&shift);
        let [n, c, h, w] = self.spatial4("film")?;
        let hw = h * w;
        let value = {
            let (x, s, b) = (
                self.tape.node(self.id),
                self.tape.node(scale.id),
                self.tape.node(shift.id),
            );
            if s.shape != [n, c] {
                return Err(mismatch("film scale", &x.shape, &s.shape));
            }
            if b.shape != [n, c] {
                return Err(mismatch("film shift", &x.shape, &b.shape));
            }
            let mut out = Vec::with_capacity(x.value.len());
            for p in 0..n * c {
                let f = T::one() + s.value[p];
                let sh = b.value[p];
                out.extend(x.value[p * hw..(p + 1) * hw].iter().map(|&v| v * f + sh));
            }
            out
        };
        let tracked = self.tracked_any(&[self.id, scale.id, shift.id]);
        let op = Op::Film {
            x: self.id,
            scale: scale.id,
            shift: shift.id,
        };
        Ok(self.tape.push(vec![n, c, h, w], value, op, tracked))
    }

    /// Mean of the table rows selected by each bag: `[V, d] -> [bags, d]`.
    pub fn embedding_bag_mean(self, bags: &[Vec<usize>]) -> Result<Var<'t, T>> {
        let (value, d, tracked) = {
            let t = self.tape.node(self.id);
            if t.shape.len() != 2 {
                return Err(bad_shape("embedding_bag_mean", &t.shape, "table must be rank 2"));
            }
            let (v, d) = (t.shape[0], t.shape[1]);
            let mut out = Vec::with_capacity(bags.len() * d);
            for bag in bags {
                if bag.is_empty() {
                    return Err(Error::EmptyBatch("embedding bag"));
                }
                if let Some(&bad) = bag.iter().find(|&&i| i >= v) {
                    return Err(bad_shape(
                        "embedding_bag_mean",
                        &t.shape,
                        format!("token id {bad} out of range"),
                    ));
                }
                let inv = T::one() / T::lit(bag.len() as f64);
                for c in 0..d {
                    let s: T = bag.iter().map(|&i| t.value[i * d + c]).sum();
                    out.push(s * inv);
                }
            }
            (out, d, t.tracked)
        };
        let op = Op::EmbeddingBagMean {
            table: self.id,
            bags: bags.to_vec(),
        };
        Ok(self.tape.push(vec![bags.len(), d], value, op, tracked))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(self) -> Result<Var<'t, T>> {
        let [n, c, h, w] = self.spatial4("spatial_mean")?;
        let hw = h * w;
        let (value, tracked) = {
            let a = self.tape.node(self.id);
            let inv = T::one() / T::lit(hw as f64);
            let v = (0..n * c)
                .map(|p| a.value[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
                .collect();
            (v, a.tracked)
        };
        Ok(self.tape.push(vec![n, c], value, Op::SpatialMean(self.id), tracked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let y = x.square().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get_slice(x).unwrap(), &[6.0]);
    }

    #[test]
    fn masked_sum_gradient_is_the_mask() {
        let tape = Tape::<f64>::new();
        let m = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let x = tape.param(&Tensor::new(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
        let mv = tape.constant(m.clone());
        let loss = mv.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_slice(x).unwrap(), m.data());
        assert!(g.get_slice(mv).is_none());
    }

    #[test]
    fn mask_complement_annihilates() {
        let tape = Tape::<f32>::new();
        let m = tape.constant(Tensor::ones(&[2, 3]));
        let one_minus_m = m.scale(-1.0).add_scalar(1.0);
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32 + 1.0));
        let out = one_minus_m.mul(x).unwrap().to_tensor();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"));
        assert!(a.matmul(a).is_err());
        let x3 = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let bias = tape.constant(Tensor::zeros(&[1]));
        assert!(x3.conv2d(w, bias).is_err());
    }

    #[test]
    fn untracked_branches_get_no_gradient() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let p = tape.param(&Tensor::ones(&[3]));
        let loss = c.add(p).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get_slice(c).is_none());
        assert_eq!(g.get_slice(p).unwrap(), &[1.0, 1.0, 1.0]);
    }
}
