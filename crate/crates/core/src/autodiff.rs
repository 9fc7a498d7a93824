//! Define-by-run automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly when it is
//! recorded, so shape errors surface at construction and [`Graph::value`]
//! is a plain lookup. On top of the recorded values the graph offers
//!
//! * reverse mode ([`Graph::backward`]) returning a [`GradientMap`] over
//!   every parameter node,
//! * forward mode ([`Graph::jvp`]) propagating a tangent from seeded nodes,
//! * [`Graph::stop_gradient`], which is value-transparent and blocks both
//!   adjoints and tangents.
//!
//! Tensors are `ndarray::Array2<f64>`; vectors are single rows or columns
//! and scalars are `1x1`. Elementwise binary operations broadcast a unit
//! dimension against a full one, numpy style.
//!
//! ```
//! use vfm_core::autodiff::Graph;
//! use ndarray::arr2;
//!
//! let mut g = Graph::new();
//! let x = g.parameter(arr2(&[[3.0]]));
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
//! ```

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Silu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    /// Sum of all entries, `1x1`.
    Sum(NodeId),
    /// Mean of all entries, `1x1`.
    Mean(NodeId),
    /// Row-wise sum over columns, `m x 1`.
    SumCols(NodeId),
    Scale(NodeId, f64),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Clamp(NodeId, f64, f64),
    StopGrad(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    /// Takes ownership of a gradient, leaving nothing behind.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums a broadcast adjoint back down to `target`.
fn unbroadcast(grad: Tensor, target: (usize, usize)) -> Tensor {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn scalar(v: f64) -> Tensor {
    Array2::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("node {} does not belong to this graph", id.0)))
        }
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.input(scalar(v))
    }

    /// Trainable leaf; [`Graph::backward`] reports a gradient for it.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Parameter, true)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Value of a recorded node. Values are computed when nodes are
    /// recorded, so this never fails for a valid id.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "scalar_value",
                lhs: v.dim(),
                rhs: (1, 1),
            });
        }
        Ok(v[[0, 0]])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        broadcast_shape(name, shape(va), shape(vb))?;
        let value = f(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        let value = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let v = scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Mean(a), rg))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        Ok(self.push(v, Op::SumCols(a), rg))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.nodes[parts[0].0].value.nrows();
        for &p in parts {
            let d = self.nodes[p.0].value.dim();
            if d.0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: (rows, 0),
                    rhs: d,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(a)?;
        let d = self.nodes[a.0].value.dim();
        if start >= end || end > d.1 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: d,
                rhs: (start, end),
            });
        }
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    /// Value-identical copy that contributes nothing to adjoints or tangents.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(value, Op::StopGrad(a), false))
    }

    /// Reverse-mode gradients of a `1x1` loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        self.check(loss)?;
        let d = self.shape(loss);
        if d != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: d,
                rhs: (1, 1),
            });
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(scalar(1.0));
        }

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::StopGrad(_) => {}
                Op::Parameter => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accum(&mut adj, *a, || unbroadcast(g.clone(), self.shape(*a)));
                    self.accum(&mut adj, *b, || unbroadcast(g.clone(), self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, *a, || unbroadcast(g.clone(), self.shape(*a)));
                    self.accum(&mut adj, *b, || unbroadcast(-&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accum(&mut adj, *a, || unbroadcast(&g * vb, va.dim()));
                    self.accum(&mut adj, *b, || unbroadcast(&g * va, vb.dim()));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accum(&mut adj, *a, || g.dot(&vb.t()));
                    self.accum(&mut adj, *b, || va.t().dot(&g));
                }
                Op::Silu(a) => {
                    let va = self.value(*a);
                    self.accum(&mut adj, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out).and(va).for_each(|o, &x| *o *= silu_grad(x));
                        out
                    });
                }
                Op::Exp(a) => {
                    self.accum(&mut adj, *a, || &g * &node.value);
                }
                Op::Log(a) => {
                    let va = self.value(*a);
                    self.accum(&mut adj, *a, || &g / va);
                }
                Op::Square(a) => {
                    let va = self.value(*a);
                    self.accum(&mut adj, *a, || &g * va * 2.0);
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    self.accum(&mut adj, *a, || Array2::from_elem(self.shape(*a), gv));
                }
                Op::Mean(a) => {
                    let d = self.shape(*a);
                    let gv = g[[0, 0]] / (d.0 * d.1) as f64;
                    self.accum(&mut adj, *a, || Array2::from_elem(d, gv));
                }
                Op::SumCols(a) => {
                    let d = self.shape(*a);
                    self.accum(&mut adj, *a, || g.broadcast(d).expect("column vector").to_owned());
                }
                Op::Scale(a, k) => {
                    self.accum(&mut adj, *a, || &g * *k);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let (lo, hi) = (start, start + w);
                        self.accum(&mut adj, *p, || g.slice(s![.., lo..hi]).to_owned());
                        start = hi;
                    }
                }
                Op::SliceCols(a, lo, hi) => {
                    let d = self.shape(*a);
                    self.accum(&mut adj, *a, || {
                        let mut full = Array2::zeros(d);
                        full.slice_mut(s![.., *lo..*hi]).assign(&g);
                        full
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a);
                    self.accum(&mut adj, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out).and(va).for_each(|o, &x| {
                            if x < *lo || x > *hi {
                                *o = 0.0;
                            }
                        });
                        out
                    });
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Parameter) {
                let g = if i < n { adj[i].take() } else { None };
                grads.insert(NodeId(i), g.unwrap_or_else(|| Array2::zeros(node.value.dim())));
            }
        }
        Ok(GradientMap { grads })
    }

    fn accum(&self, adj: &mut [Option<Tensor>], id: NodeId, contrib: impl FnOnce() -> Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let c = contrib();
        match &mut adj[id.0] {
            Some(existing) => *existing += &c,
            slot @ None => *slot = Some(c),
        }
    }

    /// Forward-mode directional derivative of `root`.
    ///
    /// `seeds` assigns tangents to nodes, usually inputs. A seeded node is
    /// treated as an independent variable: its tangent is the seed regardless
    /// of its ancestors. Unseeded leaves have zero tangent.
    pub fn jvp(&self, root: NodeId, seeds: &[(NodeId, Tensor)]) -> Result<Tensor> {
        self.check(root)?;
        let n = root.0 + 1;
        let mut tan: Vec<Option<Tensor>> = vec![None; n];
        for (id, t) in seeds {
            self.check(*id)?;
            let d = self.shape(*id);
            if t.dim() != d {
                return Err(Error::Shape {
                    op: "jvp seed",
                    lhs: d,
                    rhs: t.dim(),
                });
            }
            if id.0 < n {
                tan[id.0] = Some(t.clone());
            }
        }
        let seeded: Vec<bool> = {
            let mut v = vec![false; n];
            for (id, _) in seeds {
                if id.0 < n {
                    v[id.0] = true;
                }
            }
            v
        };

        for i in 0..n {
            if seeded[i] {
                continue;
            }
            let node = &self.nodes[i];
            let t = match &node.op {
                Op::Input | Op::Parameter | Op::StopGrad(_) => None,
                Op::Add(a, b) => add_opt(&tan[a.0], &tan[b.0], node.value.dim(), false),
                Op::Sub(a, b) => add_opt(&tan[a.0], &tan[b.0], node.value.dim(), true),
                Op::Mul(a, b) => {
                    let ta = tan[a.0].as_ref().map(|t| t * self.value(*b));
                    let tb = tan[b.0].as_ref().map(|t| self.value(*a) * t);
                    add_opt(&ta, &tb, node.value.dim(), false)
                }
                Op::MatMul(a, b) => {
                    let ta = tan[a.0].as_ref().map(|t| t.dot(self.value(*b)));
                    let tb = tan[b.0].as_ref().map(|t| self.value(*a).dot(t));
                    add_opt(&ta, &tb, node.value.dim(), false)
                }
                Op::Silu(a) => tan[a.0].as_ref().map(|t| {
                    let mut out = t.clone();
                    Zip::from(&mut out)
                        .and(self.value(*a))
                        .for_each(|o, &x| *o *= silu_grad(x));
                    out
                }),
                Op::Exp(a) => tan[a.0].as_ref().map(|t| t * &node.value),
                Op::Log(a) => tan[a.0].as_ref().map(|t| t / self.value(*a)),
                Op::Square(a) => tan[a.0].as_ref().map(|t| t * self.value(*a) * 2.0),
                Op::Sum(a) => tan[a.0].as_ref().map(|t| scalar(t.sum())),
                Op::Mean(a) => tan[a.0].as_ref().map(|t| scalar(t.sum() / t.len() as f64)),
                Op::SumCols(a) => tan[a.0]
                    .as_ref()
                    .map(|t| t.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::Scale(a, k) => tan[a.0].as_ref().map(|t| t * *k),
                Op::Concat(parts) => {
                    if parts.iter().any(|p| tan[p.0].is_some()) {
                        let owned: Vec<Tensor> = parts
                            .iter()
                            .map(|p| {
                                tan[p.0]
                                    .clone()
                                    .unwrap_or_else(|| Array2::zeros(self.shape(*p)))
                            })
                            .collect();
                        let views: Vec<_> = owned.iter().map(|t| t.view()).collect();
                        Some(concatenate(Axis(1), &views).expect("row counts checked"))
                    } else {
                        None
                    }
                }
                Op::SliceCols(a, lo, hi) => tan[a.0]
                    .as_ref()
                    .map(|t| t.slice(s![.., *lo..*hi]).to_owned()),
                Op::Clamp(a, lo, hi) => tan[a.0].as_ref().map(|t| {
                    let mut out = t.clone();
                    Zip::from(&mut out).and(self.value(*a)).for_each(|o, &x| {
                        if x < *lo || x > *hi {
                            *o = 0.0;
                        }
                    });
                    out
                }),
            };
            tan[i] = t;
        }
        Ok(tan[root.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shape(root))))
    }
}

fn add_opt(a: &Option<Tensor>, b: &Option<Tensor>, out: (usize, usize), negate_b: bool) -> Option<Tensor> {
    let widen = |t: &Tensor| -> Tensor {
        if t.dim() == out {
            t.clone()
        } else {
            t.broadcast(out).expect("shape checked at construction").to_owned()
        }
    };
    match (a, b) {
        (None, None) => None,
        (Some(x), None) => Some(widen(x)),
        (None, Some(y)) => {
            let y = widen(y);
            Some(if negate_b { -y } else { y })
        }
        (Some(x), Some(y)) => {
            let mut x = widen(x);
            if negate_b {
                x = x - y;
            } else {
                x = x + y;
            }
            Some(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn silu_at_zero() {
        let mut g = Graph::new();
        let x = g.input(arr2(&[[0.0]]));
        let y = g.silu(x).unwrap();
        assert_eq!(g.value(y)[[0, 0]], 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i2 = g.input(Array2::eye(2));
        let v = g.input(arr2(&[[1.5], [-2.0]]));
        let y = g.matmul(i2, v).unwrap();
        assert_eq!(g.value(y), &arr2(&[[1.5], [-2.0]]));
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(arr2(&[[3.0, 4.0]]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.scalar_value(s).unwrap(), 25.0);
    }

    #[test]
    fn shape_mismatch_at_construction() {
        let mut g = Graph::new();
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((3, 2)));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.matmul(a, a).is_err());
        let c = g.input(Array2::zeros((3, 3)));
        assert!(g.concat(&[a, c]).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(arr2(&[[3.0]]));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn stopgrad_blocks_one_factor() {
        let mut g = Graph::new();
        let x = g.parameter(arr2(&[[3.0]]));
        let sx = g.stop_gradient(x).unwrap();
        let y = g.mul(sx, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn stopgrad_value_zero_grad_zero_tangent() {
        let mut g = Graph::new();
        let x = g.parameter(arr2(&[[5.0]]));
        let sx = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(sx)[[0, 0]], 5.0);
        let grads = g.backward(sx).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 0.0);
        let t = g.jvp(sx, &[(x, arr2(&[[1.0]]))]).unwrap();
        assert_eq!(t[[0, 0]], 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.parameter(Array2::zeros((2, 1)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn jvp_square_and_linear() {
        let mut g = Graph::new();
        let x = g.input(arr2(&[[3.0]]));
        let y = g.square(x).unwrap();
        assert_eq!(g.jvp(y, &[(x, arr2(&[[1.0]]))]).unwrap()[[0, 0]], 6.0);

        let mut g = Graph::new();
        let w = g.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let x = g.input(arr2(&[[0.5], [0.25]]));
        let y = g.matmul(w, x).unwrap();
        let v = arr2(&[[1.0], [-1.0]]);
        let t = g.jvp(y, &[(x, v.clone())]).unwrap();
        assert_eq!(t, arr2(&[[1.0, 2.0], [3.0, 4.0]]).dot(&v));
    }

    #[test]
    fn jvp_seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((1, 2)));
        let y = g.square(x).unwrap();
        assert!(g.jvp(y, &[(x, Array2::zeros((2, 1)))]).is_err());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        // (x [2x3] + b [1x3]) summed: db = column counts.
        let mut g = Graph::new();
        let x = g.input(Array2::ones((2, 3)));
        let b = g.parameter(Array2::zeros((1, 3)));
        let c = g.parameter(Array2::zeros((2, 1)));
        let y = g.add(x, b).unwrap();
        let y = g.mul(y, c).unwrap();
        let y = g.add(y, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &arr2(&[[2.0, 2.0, 2.0]]));
        assert_eq!(grads.get(c).unwrap(), &arr2(&[[3.0], [3.0]]));
    }

    #[test]
    fn unreachable_parameter_gets_zero_entry() {
        let mut g = Graph::new();
        let a = g.parameter(arr2(&[[1.0, 2.0]]));
        let b = g.parameter(arr2(&[[1.0]]));
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn slice_concat_clamp_roundtrip_gradients() {
        let mut g = Graph::new();
        let x = g.parameter(arr2(&[[1.0, -20.0, 3.0]]));
        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 3).unwrap();
        let right = g.clamp(right, -10.0, 2.0).unwrap();
        let y = g.concat(&[right, left]).unwrap();
        assert_eq!(g.value(y), &arr2(&[[-10.0, 2.0, 1.0]]));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &arr2(&[[1.0, 0.0, 0.0]]));
    }
}
