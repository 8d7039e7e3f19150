//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends one node, so
//! node order is a topological order by construction. [`Tape::backward`]
//! walks the nodes once in reverse and returns gradients for the registered
//! parameters only.
//!
//! ```
//! use ltto::autodiff::Tape;
//! use ltto::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(w);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spatial::SpatialOp;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// The operation kinds supported by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Clamp,
    Square,
    Sum,
    Mean,
    Scale,
    Reshape,
    Gather,
    Spatial,
    ConcatCols,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Relu(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    Reshape(usize),
    Gather(usize, Arc<Vec<usize>>),
    Spatial(usize, Arc<SpatialOp>),
    ConcatCols(usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Gather(..) => OpKind::Gather,
            Op::Spatial(..) => OpKind::Spatial,
            Op::ConcatCols(..) => OpKind::ConcatCols,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Floating-point operation counts accumulated by a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub forward: u64,
    pub backward: u64,
}

/// Gradients of a scalar loss with respect to the registered parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
    flops: FlopCount,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Broadcast rule for binary ops: `rhs` shape must equal `lhs` shape or be a
/// suffix of it, and is then repeated over the leading axes.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Sums `g` over repetitions of a block of length `n`.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            flops: FlopCount::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    /// Registered trainable parameters in registration order.
    pub fn params(&self) -> Vec<Var> {
        self.params.iter().map(|&i| self.var(i)).collect()
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, flops: u64) -> Var {
        self.flops.forward += flops;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, 0)
    }

    /// Trainable input; receives a gradient entry from [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Param, t, true, 0);
        self.params.push(v.index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = va.matmul(vb)?;
        let flops = 2 * (va.rows() * va.cols() * vb.cols()) as u64;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::MatMul(ia, ib), out, rg, flops))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if va.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = va.transpose();
        let rg = self.rg(ia);
        Ok(self.push(Op::Transpose(ia), out, rg, 0))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !broadcast_ok(va.shape(), vb.shape()) {
            return Err(Error::Shape {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vb.len();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, vb.data()[k % n]))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let flops = out.len() as u64;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(make(ia, ib), out, rg, flops))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product, with `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let flops = out.len() as u64;
        let rg = self.rg(ia);
        Ok(self.push(op, out, rg, flops))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.index), |x| x.max(0.0)).expect("valid var")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.index), f64::exp).expect("valid var")
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.index, lo, hi), |x| x.clamp(lo, hi))
            .expect("valid var")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.index), |x| x * x).expect("valid var")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.index, c), |x| c * x).expect("valid var")
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let ia = a.index;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().sum();
        let flops = v.len() as u64;
        let rg = self.rg(ia);
        self.push(Op::Sum(ia), Tensor::scalar(s), rg, flops)
    }

    /// Mean of all entries, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let ia = a.index;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let flops = v.len() as u64 + 1;
        let rg = self.rg(ia);
        self.push(Op::Mean(ia), Tensor::scalar(s), rg, flops)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(Op::Reshape(ia), out, rg, 0))
    }

    /// Selects flat entries `indices` of `a`, producing a vector.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if let Some(&bad) = indices.iter().find(|&&k| k >= v.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = Tensor::vector(indices.iter().map(|&k| v.data()[k]).collect());
        let rg = self.rg(ia);
        Ok(self.push(Op::Gather(ia, indices), out, rg, 0))
    }

    /// Applies a fixed spatial operator to a `[positions, channels]` map.
    pub fn spatial(&mut self, a: Var, op: Arc<SpatialOp>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if v.rank() != 2 || v.rows() != op.in_positions() {
            return Err(Error::Shape {
                op: "spatial",
                lhs: v.shape().to_vec(),
                rhs: vec![op.in_positions(), op.out_positions()],
            });
        }
        let c = v.cols();
        let out = Tensor::new(vec![op.out_positions(), c], op.apply(v.data(), c))?;
        let flops = 2 * (op.nnz() * c) as u64;
        let rg = self.rg(ia);
        Ok(self.push(Op::Spatial(ia, op), out, rg, flops))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            out.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new(vec![m, ca + cb], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::ConcatCols(ia, ib), out, rg, 0))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let shape = self.nodes[il].value.shape();
        if !shape.is_empty() {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        adj[il] = Some(vec![1.0]);
        let mut flops = 0u64;

        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let send = |j: usize, contrib: Vec<f64>, adj: &mut Vec<Option<Vec<f64>>>| {
                match &mut adj[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if self.nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt_into(&g, vb.data(), &mut ga, m, n, k);
                        flops += 2 * (m * n * k) as u64;
                        send(*a, ga, &mut adj);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn_into(va.data(), &g, &mut gb, m, k, n);
                        flops += 2 * (m * n * k) as u64;
                        send(*b, gb, &mut adj);
                    }
                }
                Op::Transpose(a) => {
                    let va = &self.nodes[*a].value;
                    let gt = Tensor::new(vec![va.cols(), va.rows()], g)?.transpose();
                    send(*a, gt.into_data(), &mut adj);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    flops += g.len() as u64;
                    if self.nodes[*b].requires_grad {
                        let n = self.nodes[*b].value.len();
                        let mut gb = reduce_to(&g, n);
                        if sign < 0.0 {
                            gb.iter_mut().for_each(|x| *x = -*x);
                        }
                        send(*b, gb, &mut adj);
                    }
                    if self.nodes[*a].requires_grad {
                        send(*a, g, &mut adj);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let n = vb.len();
                    flops += 2 * g.len() as u64;
                    if self.nodes[*b].requires_grad {
                        let prod: Vec<f64> =
                            g.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                        send(*b, reduce_to(&prod, n), &mut adj);
                    }
                    if self.nodes[*a].requires_grad {
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(k, g)| g * vb.data()[k % n])
                            .collect();
                        send(*a, ga, &mut adj);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let n = vb.len();
                    flops += 3 * g.len() as u64;
                    if self.nodes[*b].requires_grad {
                        let prod: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(k, g)| {
                                let y = vb.data()[k % n];
                                -g * va.data()[k] / (y * y)
                            })
                            .collect();
                        send(*b, reduce_to(&prod, n), &mut adj);
                    }
                    if self.nodes[*a].requires_grad {
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(k, g)| g / vb.data()[k % n])
                            .collect();
                        send(*a, ga, &mut adj);
                    }
                }
                Op::Relu(a) => {
                    let va = &self.nodes[*a].value;
                    flops += g.len() as u64;
                    let ga = g
                        .iter()
                        .zip(va.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(*a, ga, &mut adj);
                }
                Op::Exp(a) => {
                    flops += g.len() as u64;
                    let ga = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    send(*a, ga, &mut adj);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &self.nodes[*a].value;
                    flops += g.len() as u64;
                    let ga = g
                        .iter()
                        .zip(va.data())
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                        .collect();
                    send(*a, ga, &mut adj);
                }
                Op::Square(a) => {
                    let va = &self.nodes[*a].value;
                    flops += 2 * g.len() as u64;
                    let ga = g.iter().zip(va.data()).map(|(g, x)| 2.0 * x * g).collect();
                    send(*a, ga, &mut adj);
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    send(*a, vec![g[0]; n], &mut adj);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    send(*a, vec![g[0] / n as f64; n], &mut adj);
                }
                Op::Scale(a, c) => {
                    flops += g.len() as u64;
                    send(*a, g.iter().map(|x| c * x).collect(), &mut adj);
                }
                Op::Reshape(a) => send(*a, g, &mut adj),
                Op::Gather(a, idx) => {
                    let mut ga = vec![0.0; self.nodes[*a].value.len()];
                    for (&k, gv) in idx.iter().zip(&g) {
                        ga[k] += gv;
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Spatial(a, op) => {
                    let c = self.nodes[*a].value.cols();
                    flops += 2 * (op.nnz() * c) as u64;
                    send(*a, op.apply_transpose(&g, c), &mut adj);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let w = ca + cb;
                    if self.nodes[*a].requires_grad {
                        let ga = g.chunks(w).flat_map(|row| row[..ca].to_vec()).collect();
                        send(*a, ga, &mut adj);
                    }
                    if self.nodes[*b].requires_grad {
                        let gb = g.chunks(w).flat_map(|row| row[ca..].to_vec()).collect();
                        send(*b, gb, &mut adj);
                    }
                }
            }
        }
        self.flops.backward += flops;

        let mut grads = BTreeMap::new();
        for &p in &self.params {
            if p > il {
                continue;
            }
            let shape = self.nodes[p].value.shape().to_vec();
            let data = adj[p]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[p].value.len()]);
            grads.insert(self.var(p), Tensor::new(shape, data)?);
        }
        Ok(Gradients { grads })
    }
}

/// Central finite differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(Tensor::identity(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_selects_indices() {
        let mut tape = Tape::new();
        let d = tape.leaf(t(&[2, 2], &[10.0, 11.0, 12.0, 13.0]));
        let s = tape.gather(d, Arc::new(vec![0, 3])).unwrap();
        assert_eq!(tape.value(s).data(), &[10.0, 13.0]);
        assert!(tape.gather(d, Arc::new(vec![4])).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(w);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.leaf(Tensor::zeros(&[2]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn bias_broadcast_over_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = tape.param(Tensor::vector(vec![1.0, -1.0, 0.5]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 2.5, 4.0, 3.0, 5.5]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));

        let mut other = Tape::new();
        let z = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(z), Err(Error::NotOnTape(_))));
    }

    #[test]
    fn leaves_receive_no_gradient_entry() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn finite_differences_basic() {
        let g = finite_difference_grad(|th| th[0] * th[0], &[3.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-6);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        // y = W x, L = sum(c ⊙ y) + 0.5 |y|², so g = c + y.
        let mut tape = Tape::new();
        let w = tape.param(t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]));
        let x = tape.leaf(t(&[2, 1], &[1.5, -2.0]));
        let y = tape.matmul(w, x).unwrap();
        let c = tape.leaf(t(&[3, 1], &[0.3, -0.2, 0.9]));
        let cy = tape.mul(y, c).unwrap();
        let lin = tape.sum(cy);
        let sq = tape.square(y);
        let quad = tape.sum(sq);
        let half = tape.scale(quad, 0.5);
        let loss = tape.add(lin, half).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        let yv = tape.value(y).data().to_vec();
        let g: Vec<f64> = yv.iter().zip([0.3, -0.2, 0.9]).map(|(y, c)| y + c).collect();
        let xv = [1.5, -2.0];
        for i in 0..3 {
            for j in 0..2 {
                assert!((gw.at(i, j) - g[i] * xv[j]).abs() < 1e-12);
            }
        }
    }
}
