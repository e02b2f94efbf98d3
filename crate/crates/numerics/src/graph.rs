//! Tape-based reverse-mode differentiation.
//!
//! Every builder method evaluates its op eagerly, appends a node, and returns
//! a [`Var`] handle. Node order is a topological order by construction, so
//! the backward sweep simply walks the tape in reverse.

use crate::error::{NumericsError, Result};
use crate::kernels::{self, BinaryOp, Window};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
    IndexAdd(Var, usize, Vec<usize>),
    DeformIm2col(Var, Var, Window),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), op)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = kernels::silu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let (out, rstd) = kernels::layer_norm_rows(self.value(x), LAYER_NORM_EPS)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LayerNorm(x, rstd), rg))
    }

    /// `normalize(x) * gain + bias`, with `gain` and `bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.normalize(x)?;
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::sum_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::mean_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis(x, axis), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::ONE / T::from_usize(n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(NumericsError::dim("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&vals, axis)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(x), axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow(x, axis, start), rg))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let out = kernels::index_select(self.value(x), axis, index)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::IndexSelect(x, axis, index.to_vec()), rg))
    }

    /// Scatter-add of `src` slices into a zero tensor of `extent` entries
    /// along `axis`.
    pub fn index_add(&mut self, src: Var, axis: usize, index: &[usize], extent: usize) -> Result<Var> {
        let out = kernels::index_add(self.value(src), axis, index, extent)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::IndexAdd(src, axis, index.to_vec()), rg))
    }

    /// See [`kernels::deform_im2col`].
    pub fn deform_im2col(&mut self, input: Var, offsets: Var, win: Window) -> Result<Var> {
        let out = kernels::deform_im2col(self.value(input), self.value(offsets), win)?;
        let rg = self.rg(input) || self.rg(offsets);
        Ok(self.push(out, Op::DeformIm2col(input, offsets, win), rg))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `params`.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        for &p in params {
            let is_leaf = p.0 < self.nodes.len() && matches!(self.nodes[p.0].op, Op::Leaf);
            if !is_leaf {
                return Err(NumericsError::UnknownLeaf(p.0));
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                match grads.get(p.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(self.value(*a), self.value(*b), g, self.rg(*a), self.rg(*b))
                    .expect("checked in forward");
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (ga, gb) =
                    kernels::binary_backward(self.value(*a), self.value(*b), g, *op, self.rg(*a), self.rg(*b));
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Silu(x) => acc(*x, kernels::silu_backward(self.value(*x), g)),
            Op::Softmax(x) => acc(*x, kernels::softmax_backward(&node.value, g)),
            Op::LayerNorm(x, rstd) => acc(*x, kernels::layer_norm_backward(&node.value, rstd, g)),
            Op::SumAxis(x, axis) => acc(*x, kernels::expand_axis(g, self.shape(*x), *axis, T::ONE)),
            Op::MeanAxis(x, axis) => {
                let ext = self.shape(*x)[*axis].max(1);
                acc(
                    *x,
                    kernels::expand_axis(g, self.shape(*x), *axis, T::ONE / T::from_usize(ext)),
                )
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, perm) => acc(*x, kernels::permute_grad(g, out_shape, perm)),
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.rg(x) {
                        let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                        acc(x, kernels::narrow(&gt, *axis, start, len).expect("in range").to_vec());
                    }
                    start += len;
                }
            }
            Op::Narrow(x, axis, start) => {
                let len = out_shape[*axis];
                let ext = self.shape(*x)[*axis];
                let index: Vec<usize> = (*start..*start + len).collect();
                let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                acc(
                    *x,
                    kernels::index_add(&gt, *axis, &index, ext).expect("in range").to_vec(),
                );
            }
            Op::IndexSelect(x, axis, index) => {
                let ext = self.shape(*x)[*axis];
                let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                acc(
                    *x,
                    kernels::index_add(&gt, *axis, index, ext).expect("in range").to_vec(),
                );
            }
            Op::IndexAdd(x, axis, index) => {
                let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                acc(*x, kernels::index_select(&gt, *axis, index).expect("in range").to_vec());
            }
            Op::DeformIm2col(input, offsets, win) => {
                let (gi, go) = kernels::deform_im2col_backward(
                    self.value(*input),
                    self.value(*offsets),
                    *win,
                    g,
                    self.rg(*input),
                    self.rg(*offsets),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(go) = go {
                    acc(*offsets, go);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.grad(y, &[x]).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(7.0));
        let y = g.scale(c, 2.0);
        assert_eq!(g.grad(y, &[x]).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        let b = g.param(Tensor::from_fn(&[3, 4], |i| 1.0 - i as f64 * 0.25));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        let ga = &g.grad(s, &[a]).unwrap()[0];
        let bt = kernels::permute(g.value(b), &[1, 0]).unwrap();
        let want = kernels::matmul(&Tensor::ones(&[2, 4]), &bt).unwrap();
        assert!(ga.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn unknown_leaf_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.square(x);
        assert!(matches!(g.grad(y, &[y]), Err(NumericsError::UnknownLeaf(_))));
        assert!(matches!(g.grad(y, &[Var(99)]), Err(NumericsError::UnknownLeaf(99))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.grad(x, &[x]), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        // z = 2x², dz/dx = 4x
        assert_eq!(g.grad(z, &[x]).unwrap()[0].item(), 8.0);
    }
}
