use std::cell::{Ref, RefCell};

use super::kernels::{self, GroupStats};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary { kind: BinaryOp, a: usize, b: usize },
    Scale { a: usize, c: T },
    AddConst { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Conv1d { x: usize, w: usize, c_in: usize, len: usize, c_out: usize, stride: usize },
    GroupNorm { x: usize, groups: usize, stats: GroupStats<T> },
    Mish { x: usize },
    SoftmaxRows { x: usize, rows: usize, cols: usize },
    Concat { parts: Vec<(usize, usize)>, axis: usize, rows: usize, cols: usize },
    Upsample2x { x: usize, channels: usize, len: usize },
    Sum { a: usize },
    Mean { a: usize },
    AxisAdd { x: usize, v: usize, axis: usize, rows: usize, cols: usize },
    AxisMul { x: usize, v: usize, axis: usize, rows: usize, cols: usize },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records differentiable operations in creation order.
///
/// Creation order is a topological order, so the backward pass is a single
/// reverse sweep. [`Tape::backward`] consumes the tape, freeing every saved
/// forward value.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` for untracked
    /// nodes and nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A tracked input; receives a gradient on backward.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same value as `x`, but no gradient flows back through the result.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Elementwise binary op. Shapes must match exactly, or one side must be
    /// a single-element tensor which is broadcast.
    pub fn binary(&self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (na, nb) = (ta.numel(), tb.numel());
            let shape = if ta.shape() == tb.shape() || nb == 1 {
                ta.shape().to_vec()
            } else if na == 1 {
                tb.shape().to_vec()
            } else {
                return Err(shape_err(
                    "elementwise",
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            };
            let n = numel(&shape);
            let (da, db) = (ta.data(), tb.data());
            let f = |x: T, y: T| match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            };
            let data = (0..n)
                .map(|i| f(da[if na == 1 { 0 } else { i }], db[if nb == 1 { 0 } else { i }]))
                .collect();
            (
                Tensor::new(shape, data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.tracked(&[a.0]);
        self.push(value, rg, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.tracked(&[a.0]);
        self.push(value, rg, Op::AddConst { a: a.0 })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k) = ta.dims2()?;
            let (k2, n) = tb.dims2()?;
            if k != k2 {
                return Err(shape_err(
                    "matmul",
                    format!("[{m}×{k}] · [{k2}×{n}]"),
                ));
            }
            let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
            (Tensor::new([m, n], data)?, m, k, n)
        };
        let rg = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let ta = self.value(a);
            let (r, c) = ta.dims2()?;
            (ta.transpose()?, r, c)
        };
        let rg = self.tracked(&[a.0]);
        Ok(self.push(value, rg, Op::Transpose { a: a.0, rows, cols }))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.tracked(&[a.0]);
        Ok(self.push(value, rg, Op::Reshape { a: a.0 }))
    }

    /// `x[C_in×T] ⋆ w[C_out×C_in×5]`, zero padding 2, stride 1 or 2.
    pub fn conv1d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(shape_err("conv1d", format!("stride {stride} not in {{1, 2}}")));
        }
        let (value, c_in, len, c_out) = {
            let (tx, tw) = (self.value(x), self.value(w));
            let (c_in, len) = tx.dims2()?;
            let (c_out, wc, k) = match tw.shape() {
                &[o, c, k] => (o, c, k),
                s => return Err(shape_err("conv1d", format!("kernel shape {s:?}"))),
            };
            if wc != c_in || k != kernels::CONV_KERNEL {
                return Err(shape_err(
                    "conv1d",
                    format!("input [{c_in}×{len}] with kernel {:?}", tw.shape()),
                ));
            }
            let data = kernels::conv1d(tx.data(), tw.data(), c_in, len, c_out, stride);
            let out_len = kernels::conv1d_out_len(len, stride);
            (Tensor::new([c_out, out_len], data)?, c_in, len, c_out)
        };
        let rg = self.tracked(&[x.0, w.0]);
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                c_in,
                len,
                c_out,
                stride,
            },
        ))
    }

    pub fn group_norm(&self, x: Var, groups: usize) -> Result<Var> {
        let (value, stats) = {
            let tx = self.value(x);
            let (c, len) = tx.dims2()?;
            if groups == 0 || c % groups != 0 {
                return Err(shape_err(
                    "group_norm",
                    format!("{c} channels not divisible into {groups} groups"),
                ));
            }
            let stats = kernels::group_norm(tx.data(), c, len, groups);
            (Tensor::new([c, len], stats.normalized.clone())?, stats)
        };
        let rg = self.tracked(&[x.0]);
        Ok(self.push(value, rg, Op::GroupNorm { x: x.0, groups, stats }))
    }

    pub fn mish(&self, x: Var) -> Var {
        let value = self.value(x).map(kernels::mish);
        let rg = self.tracked(&[x.0]);
        self.push(value, rg, Op::Mish { x: x.0 })
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let tx = self.value(x);
            let (r, c) = tx.dims2()?;
            (
                Tensor::new([r, c], kernels::softmax_rows(tx.data(), r, c))?,
                r,
                c,
            )
        };
        let rg = self.tracked(&[x.0]);
        Ok(self.push(value, rg, Op::SoftmaxRows { x: x.0, rows, cols }))
    }

    /// Concatenates 2-D tensors along `axis` (0: rows/channels, 1: columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", format!("{} parts, axis {axis}", parts.len())));
        }
        let (value, extents, rows, cols) = {
            let nodes = self.nodes.borrow();
            let dims = parts
                .iter()
                .map(|p| nodes[p.0].value.dims2())
                .collect::<Result<Vec<_>>>()?;
            let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
            if dims
                .iter()
                .any(|&(r, c)| (if axis == 0 { c } else { r }) != fixed)
            {
                return Err(shape_err("concat", format!("incompatible parts {dims:?}")));
            }
            let extents: Vec<usize> = dims
                .iter()
                .map(|&(r, c)| if axis == 0 { r } else { c })
                .collect();
            let total: usize = extents.iter().sum();
            let (rows, cols) = if axis == 0 { (total, fixed) } else { (fixed, total) };
            let mut data = Vec::with_capacity(rows * cols);
            if axis == 0 {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.data());
                }
            } else {
                for i in 0..rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.0].value.row(i));
                    }
                }
            }
            (Tensor::new([rows, cols], data)?, extents, rows, cols)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.tracked(&ids);
        let parts = ids.into_iter().zip(extents).collect();
        Ok(self.push(value, rg, Op::Concat { parts, axis, rows, cols }))
    }

    /// Nearest-neighbour 2× upsampling along the temporal (column) axis.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let (value, channels, len) = {
            let tx = self.value(x);
            let (c, l) = tx.dims2()?;
            (
                Tensor::new([c, 2 * l], kernels::upsample2x(tx.data(), c, l))?,
                c,
                l,
            )
        };
        let rg = self.tracked(&[x.0]);
        Ok(self.push(value, rg, Op::Upsample2x { x: x.0, channels, len }))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.tracked(&[a.0]);
        self.push(value, rg, Op::Sum { a: a.0 })
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::scalar(t.sum() / lit(t.numel() as f64))
        };
        let rg = self.tracked(&[a.0]);
        self.push(value, rg, Op::Mean { a: a.0 })
    }

    fn axis_op(&self, x: Var, v: Var, axis: usize, mul: bool) -> Result<Var> {
        let op_name = if mul { "axis_mul" } else { "axis_add" };
        let (value, rows, cols) = {
            let (tx, tv) = (self.value(x), self.value(v));
            let (rows, cols) = tx.dims2()?;
            let want = if axis == 0 { rows } else { cols };
            if axis > 1 || tv.numel() != want {
                return Err(shape_err(
                    op_name,
                    format!("x {:?}, v {:?}, axis {axis}", tx.shape(), tv.shape()),
                ));
            }
            let (dx, dv) = (tx.data(), tv.data());
            let data = (0..rows * cols)
                .map(|i| {
                    let s = dv[if axis == 0 { i / cols } else { i % cols }];
                    if mul {
                        dx[i] * s
                    } else {
                        dx[i] + s
                    }
                })
                .collect();
            (Tensor::new([rows, cols], data)?, rows, cols)
        };
        let rg = self.tracked(&[x.0, v.0]);
        let (x, v) = (x.0, v.0);
        let op = if mul {
            Op::AxisMul { x, v, axis, rows, cols }
        } else {
            Op::AxisAdd { x, v, axis, rows, cols }
        };
        Ok(self.push(value, rg, op))
    }

    /// Adds a vector along `axis` of a 2-D tensor: with `axis = 0` entry `i`
    /// of `v` is added to row `i`; with `axis = 1` entry `j` to column `j`.
    pub fn axis_add(&self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.axis_op(x, v, axis, false)
    }

    /// Multiplicative counterpart of [`Tape::axis_add`].
    pub fn axis_mul(&self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.axis_op(x, v, axis, true)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut out: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e = *e + v;
                    }
                }
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                &Op::Binary { kind, a, b } => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    let (na, nb) = (va.len(), vb.len());
                    let at = |v: &[T], i: usize| v[if v.len() == 1 { 0 } else { i }];
                    let reduce = |full: Vec<T>, len: usize| {
                        if len == 1 && full.len() != 1 {
                            vec![full.iter().fold(T::zero(), |s, &x| s + x)]
                        } else {
                            full
                        }
                    };
                    let idx = 0..g.len();
                    let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                        BinaryOp::Add => (g.clone(), g.clone()),
                        BinaryOp::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        BinaryOp::Mul => idx
                            .map(|i| (g[i] * at(vb, i), g[i] * at(va, i)))
                            .unzip(),
                        BinaryOp::Div => idx
                            .map(|i| {
                                let (x, y) = (at(va, i), at(vb, i));
                                (g[i] / y, -g[i] * x / (y * y))
                            })
                            .unzip(),
                    };
                    acc(&nodes, &mut grads, a, reduce(ga, na));
                    acc(&nodes, &mut grads, b, reduce(gb, nb));
                }
                &Op::Scale { a, c } => {
                    acc(&nodes, &mut grads, a, g.iter().map(|&x| x * c).collect());
                }
                &Op::AddConst { a } => acc(&nodes, &mut grads, a, g.clone()),
                &Op::Matmul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let ga = kernels::matmul_nt(&g, nodes[b].value.data(), m, n, k);
                        acc(&nodes, &mut grads, a, ga);
                    }
                    if nodes[b].requires_grad {
                        let gb = kernels::matmul_tn(nodes[a].value.data(), &g, m, k, n);
                        acc(&nodes, &mut grads, b, gb);
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    acc(&nodes, &mut grads, a, kernels::transpose(&g, cols, rows));
                }
                &Op::Reshape { a } => acc(&nodes, &mut grads, a, g.clone()),
                &Op::Conv1d {
                    x,
                    w,
                    c_in,
                    len,
                    c_out,
                    stride,
                } => {
                    let (gx, gw) = kernels::conv1d_backward(
                        &g,
                        nodes[x].value.data(),
                        nodes[w].value.data(),
                        c_in,
                        len,
                        c_out,
                        stride,
                    );
                    acc(&nodes, &mut grads, x, gx);
                    acc(&nodes, &mut grads, w, gw);
                }
                Op::GroupNorm { x, groups, stats } => {
                    let gx = kernels::group_norm_backward(&g, stats, *groups);
                    acc(&nodes, &mut grads, *x, gx);
                }
                &Op::Mish { x } => {
                    let gx = g
                        .iter()
                        .zip(nodes[x].value.data())
                        .map(|(&gi, &xi)| gi * kernels::mish_grad(xi))
                        .collect();
                    acc(&nodes, &mut grads, x, gx);
                }
                &Op::SoftmaxRows { x, rows, cols } => {
                    let gx = kernels::softmax_rows_backward(&g, node.value.data(), rows, cols);
                    acc(&nodes, &mut grads, x, gx);
                }
                Op::Concat {
                    parts,
                    axis,
                    rows,
                    cols,
                } => {
                    let mut offset = 0;
                    for &(p, extent) in parts {
                        let gp = if *axis == 0 {
                            g[offset * cols..(offset + extent) * cols].to_vec()
                        } else {
                            (0..*rows)
                                .flat_map(|i| {
                                    g[i * cols + offset..i * cols + offset + extent].iter().copied()
                                })
                                .collect()
                        };
                        acc(&nodes, &mut grads, p, gp);
                        offset += extent;
                    }
                }
                &Op::Upsample2x { x, channels, len } => {
                    acc(&nodes, &mut grads, x, kernels::upsample2x_backward(&g, channels, len));
                }
                &Op::Sum { a } => {
                    let n = nodes[a].value.numel();
                    acc(&nodes, &mut grads, a, vec![g[0]; n]);
                }
                &Op::Mean { a } => {
                    let n = nodes[a].value.numel();
                    let v = g[0] / lit(n as f64);
                    acc(&nodes, &mut grads, a, vec![v; n]);
                }
                &Op::AxisAdd {
                    x,
                    v,
                    axis,
                    rows,
                    cols,
                } => {
                    if nodes[v].requires_grad {
                        acc(&nodes, &mut grads, v, reduce_axis(&g, rows, cols, axis, None));
                    }
                    acc(&nodes, &mut grads, x, g.clone());
                }
                &Op::AxisMul {
                    x,
                    v,
                    axis,
                    rows,
                    cols,
                } => {
                    let (dx, dv) = (nodes[x].value.data(), nodes[v].value.data());
                    if nodes[v].requires_grad {
                        acc(&nodes, &mut grads, v, reduce_axis(&g, rows, cols, axis, Some(dx)));
                    }
                    if nodes[x].requires_grad {
                        let gx = (0..rows * cols)
                            .map(|i| g[i] * dv[if axis == 0 { i / cols } else { i % cols }])
                            .collect();
                        acc(&nodes, &mut grads, x, gx);
                    }
                }
            }
            if node.requires_grad {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Sums `g ⊙ weight` over the broadcast dimension of an axis op.
fn reduce_axis<T: Scalar>(
    g: &[T],
    rows: usize,
    cols: usize,
    axis: usize,
    weight: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); if axis == 0 { rows } else { cols }];
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            let term = match weight {
                Some(w) => g[k] * w[k],
                None => g[k],
            };
            let slot = if axis == 0 { i } else { j };
            out[slot] = out[slot] + term;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_closed_form() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_has_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.5, -2.0, 3.25, 7.0]));
        let y = tape.sub(x, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let m = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn matmul_closed_forms() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(*tape.value(p), *tape.value(m));
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn untracked_inputs_get_nothing() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn stop_gradient_closed_forms() {
        // sg(x) is bitwise equal to x
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.1, -0.7, 2.5]));
        let s = tape.stop_gradient(x);
        assert_eq!(*tape.value(s), *tape.value(x));

        // sum(sg(x) · x) has gradient sg(x)
        let p = tape.mul(s, x).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.1, -0.7, 2.5]);

        // ‖x − sg(x + v)‖² has gradient −2v
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.1, -0.7, 2.5]));
        let v = tape.constant(t(&[3], &[1.0, 2.0, -3.0]));
        let target = tape.add(x, v).unwrap();
        let target = tape.stop_gradient(target);
        let d = tape.sub(x, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        for (gi, vi) in g.get(x).unwrap().data().iter().zip([1.0, 2.0, -3.0]) {
            assert!((gi + 2.0 * vi).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_and_box() {
        let x = t(&[1, 8], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let id = tape.constant(t(&[1, 1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]));
        let y = tape.conv1d(xv, id, 1).unwrap();
        assert_eq!(*tape.value(y), x);

        let ones = tape.constant(Tensor::ones([1, 8]));
        let bx = tape.constant(Tensor::ones([1, 1, 5]));
        let y = tape.conv1d(ones, bx, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 5.0, 5.0, 5.0, 4.0, 3.0]);

        let y = tape.conv1d(ones, bx, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 5.0, 4.0]);
    }

    #[test]
    fn group_norm_constant_is_exact_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([4, 3], 0.1));
        let y = tape.group_norm(x, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.group_norm(x, 3).is_err());
    }

    #[test]
    fn group_norm_moments() {
        let tape = Tape::new();
        // variance well above ε keeps the normalized variance within 1e-6 of 1
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 3.0 - 10.0).collect();
        let x = tape.constant(t(&[6, 4], &data));
        let y = tape.group_norm(x, 3).unwrap();
        let out = tape.value(y);
        for grp in out.data().chunks(8) {
            let mean: f64 = grp.iter().sum::<f64>() / 8.0;
            let var: f64 = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mish_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 20.0, -20.0]));
        let y = tape.mish(x);
        let v = tape.value(y);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - 20.0).abs() < 1e-6);
        assert!(v.data()[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 3f64.ln(), 5.0, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 0.25).abs() < 1e-15);
        assert!((v.data()[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v.data()[2..], &[0.5, 0.5]);
    }

    #[test]
    fn concat_and_upsample_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[1, 2], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = tape.concat(&[a, a], 1).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let u = tape.upsample2x(a).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        assert!(tape.concat(&[a, b], 1).is_err());
    }
}
