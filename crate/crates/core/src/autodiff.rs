//! Reverse-mode differentiation over small dense matrix expressions.
//!
//! Nodes are evaluated eagerly as they are appended to a [`Graph`]. The
//! backward pass ([`Graph::grad`]) does not compute adjoints as raw arrays;
//! it appends new nodes to the same graph. Gradients are therefore ordinary
//! nodes and can be differentiated again, which is what gradient penalties
//! and consensus regularization need.
//!
//! Every value is a 2-D `f64` array. Scalars are `1x1`. Parameter blocks are
//! stored as a single `1xN` row and sliced into weight matrices with
//! [`Graph::slice`].
//!
//! Builder methods panic on shape mismatches between nodes (a programming
//! error in the expression); the entry points that take a [`ParamVector`]
//! validate the partition and report mismatches as [`Error`] values.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{ParamVector, Player};

pub type Tensor = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    /// `grad * 1[pre > 0]`; the mask is piecewise constant in `pre`.
    ReluMask {
        pre: Var,
        grad: Var,
    },
    Sigmoid(Var),
    LogSigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Slice {
        src: Var,
        offset: usize,
    },
    Scatter {
        src: Var,
        offset: usize,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            ReluMask { pre, grad } => [Some(pre), Some(grad)],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Sigmoid(a)
            | LogSigmoid(a)
            | Sqrt(a)
            | Recip(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastScalar(a)
            | BroadcastRows(a)
            | BroadcastCols(a) => [Some(a), None],
            Slice { src, .. } | Scatter { src, .. } => [Some(src), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// An append-only expression graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z)) = -softplus(-z)`, branch form to avoid overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let (rows, cols) = self.shape(v);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        Ok(self.value(v)[[0, 0]])
    }

    /// An input node: parameters, data, or constants. Whether a leaf is
    /// differentiated is decided by the `wrt` list handed to [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A `1xN` row leaf holding `values`.
    pub fn row(&mut self, values: &[f64]) -> Var {
        let t = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row shape is always valid");
        self.leaf(t)
    }

    pub fn constant_like(&mut self, like: Var, c: f64) -> Var {
        let t = Array2::from_elem(self.shape(like), c);
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ak) = self.shape(a);
        let (bk, _) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dimensions differ");
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.push(Op::Transpose(a), v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| z.max(0.0));
        self.push(Op::Relu(a), v)
    }

    fn relu_mask(&mut self, pre: Var, grad: Var) -> Var {
        self.same_shape(pre, grad, "relu mask");
        let mut v = self.value(grad).clone();
        // derivative at exactly 0 is taken as 0
        v.zip_mut_with(self.value(pre), |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        self.push(Op::ReluMask { pre, grad }, v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        self.push(Op::LogSigmoid(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| 1.0 / z);
        self.push(Op::Recip(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a), v)
    }

    /// `m x n -> 1 x n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumCols(a), v)
    }

    /// Sum of squares of all entries, as a `1x1` node.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub fn broadcast_scalar(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let s = self.scalar(a).expect("broadcast_scalar needs a 1x1 node");
        self.push(Op::BroadcastScalar(a), Array2::from_elem(shape, s))
    }

    /// `1 x n -> rows x n`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let (r, n) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a row vector");
        let v = self
            .value(a)
            .broadcast((rows, n))
            .expect("row broadcast")
            .to_owned();
        self.push(Op::BroadcastRows(a), v)
    }

    /// `m x 1 -> m x cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column vector");
        let v = self
            .value(a)
            .broadcast((m, cols))
            .expect("column broadcast")
            .to_owned();
        self.push(Op::BroadcastCols(a), v)
    }

    /// Row-major `rows x cols` view of `src[offset .. offset + rows*cols]`
    /// where `src` is a `1xN` row.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let (r, n) = self.shape(src);
        assert_eq!(r, 1, "slice source must be a 1xN row");
        assert!(offset + rows * cols <= n, "slice out of range");
        let src_v = self.value(src).as_standard_layout();
        let flat = src_v.as_slice().expect("standard layout");
        let v = Array2::from_shape_vec((rows, cols), flat[offset..offset + rows * cols].to_vec())
            .expect("slice shape");
        self.push(Op::Slice { src, offset }, v)
    }

    fn scatter(&mut self, src: Var, offset: usize, total: usize) -> Var {
        let mut out = vec![0.0; total];
        let src_v = self.value(src).as_standard_layout();
        let flat = src_v.as_slice().expect("standard layout");
        out[offset..offset + flat.len()].copy_from_slice(flat);
        let v = Array2::from_shape_vec((1, total), out).expect("scatter shape");
        self.push(Op::Scatter { src, offset }, v)
    }

    /// Affine map `x·W + b` with `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let rows = self.shape(xw).0;
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    /// Gradient of the scalar `out` with respect to each node in `wrt`.
    ///
    /// The returned handles are new nodes of this graph and may be used in
    /// further expressions (and differentiated again). A `wrt` node that
    /// `out` does not depend on gets a zero node of its shape.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (rows, cols) = self.shape(out);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let n = out.0 + 1;

        // Only nodes downstream of some `wrt` node need adjoints.
        let mut live = vec![false; n];
        for w in wrt {
            if w.0 < n {
                live[w.0] = true;
            }
        }
        for i in 0..n {
            if !live[i] {
                live[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| live[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if live[out.0] {
            adj[out.0] = Some(self.leaf(Array2::from_elem((1, 1), 1.0)));
        }

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !live[i] {
                continue;
            }
            let node = Var(i);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if live[a.0] {
                        let bt = self.transpose(b);
                        let da = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, da);
                    }
                    if live[b.0] {
                        let at = self.transpose(a);
                        let db = self.matmul(at, g);
                        self.accumulate(&mut adj, b, db);
                    }
                }
                Op::Transpose(a) => {
                    let d = self.transpose(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Add(a, b) => {
                    if live[a.0] {
                        self.accumulate(&mut adj, a, g);
                    }
                    if live[b.0] {
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if live[a.0] {
                        self.accumulate(&mut adj, a, g);
                    }
                    if live[b.0] {
                        let d = self.neg(g);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Mul(a, b) => {
                    if live[a.0] {
                        let d = self.mul(g, b);
                        self.accumulate(&mut adj, a, d);
                    }
                    if live[b.0] {
                        let d = self.mul(g, a);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Scale(a, c) => {
                    let d = self.scale(g, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::AddScalar(a) => self.accumulate(&mut adj, a, g),
                Op::Relu(a) => {
                    let d = self.relu_mask(a, g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::ReluMask { pre, grad } => {
                    if live[grad.0] {
                        let d = self.relu_mask(pre, g);
                        self.accumulate(&mut adj, grad, d);
                    }
                }
                Op::Sigmoid(a) => {
                    // s' = s (1 - s)
                    let one_minus = {
                        let ns = self.neg(node);
                        self.add_scalar(ns, 1.0)
                    };
                    let ds = self.mul(node, one_minus);
                    let d = self.mul(g, ds);
                    self.accumulate(&mut adj, a, d);
                }
                Op::LogSigmoid(a) => {
                    // d/dz log σ(z) = σ(-z)
                    let na = self.neg(a);
                    let s = self.sigmoid(na);
                    let d = self.mul(g, s);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(node);
                    let half = self.scale(r, 0.5);
                    let d = self.mul(g, half);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Recip(a) => {
                    let sq = self.mul(node, node);
                    let nsq = self.neg(sq);
                    let d = self.mul(g, nsq);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a);
                    let d = self.broadcast_scalar(g, shape);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumRows(a) => {
                    let cols = self.shape(a).1;
                    let d = self.broadcast_cols(g, cols);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumCols(a) => {
                    let rows = self.shape(a).0;
                    let d = self.broadcast_rows(g, rows);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastScalar(a) => {
                    let d = self.sum(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastRows(a) => {
                    let d = self.sum_cols(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastCols(a) => {
                    let d = self.sum_rows(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Slice { src, offset } => {
                    let total = self.shape(src).1;
                    let d = self.scatter(g, offset, total);
                    self.accumulate(&mut adj, src, d);
                }
                Op::Scatter { src, offset } => {
                    let (r, c) = self.shape(src);
                    let d = self.slice(g, offset, r, c);
                    self.accumulate(&mut adj, src, d);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w);
                    self.leaf(Array2::zeros(shape))
                }
            })
            .collect())
    }

    /// Gradient values (not nodes) flattened in row-major order.
    pub fn grad_values(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        let gs = self.grad(out, wrt)?;
        Ok(gs.into_iter().map(|g| flatten(self.value(g))).collect())
    }
}

pub fn flatten(t: &Tensor) -> Vec<f64> {
    t.as_standard_layout().iter().copied().collect()
}

/// Leaves handed to a [`ScalarLoss`] builder.
#[derive(Debug, Clone, Copy)]
pub struct Slots {
    /// `1 x p` row holding θ.
    pub theta: Var,
    /// `1 x q` row holding φ.
    pub phi: Var,
    /// Optional data leaf (for penalties that differentiate w.r.t. inputs).
    pub data: Option<Var>,
}

/// A scalar loss over a two-player parameter vector.
pub trait ScalarLoss {
    /// The `(p, q)` partition the builder expects.
    fn partition(&self) -> (usize, usize);

    /// Data leaf value, if the loss has one.
    fn data(&self) -> Option<Tensor> {
        None
    }

    fn build(&self, g: &mut Graph, slots: Slots) -> Var;
}

/// Adapts a closure into a [`ScalarLoss`].
pub struct FnLoss<F> {
    pub p: usize,
    pub q: usize,
    pub data: Option<Tensor>,
    pub f: F,
}

impl<F> FnLoss<F>
where
    F: Fn(&mut Graph, Slots) -> Var,
{
    pub fn new(p: usize, q: usize, f: F) -> Self {
        Self {
            p,
            q,
            data: None,
            f,
        }
    }

    pub fn with_data(mut self, data: Tensor) -> Self {
        self.data = Some(data);
        self
    }
}

impl<F> ScalarLoss for FnLoss<F>
where
    F: Fn(&mut Graph, Slots) -> Var,
{
    fn partition(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    fn data(&self) -> Option<Tensor> {
        self.data.clone()
    }

    fn build(&self, g: &mut Graph, slots: Slots) -> Var {
        (self.f)(g, slots)
    }
}

/// Which input the inner gradient of [`grad_through_grad`] is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSlot {
    Params(Player),
    Data,
}

fn setup<L: ScalarLoss + ?Sized>(loss: &L, at: &ParamVector) -> Result<(Graph, Slots)> {
    if loss.partition() != at.partition() {
        return Err(Error::Shape(format!(
            "loss expects partition {:?}, parameters have {:?}",
            loss.partition(),
            at.partition()
        )));
    }
    let mut g = Graph::new();
    let theta = g.row(at.theta());
    let phi = g.row(at.phi());
    let data = loss.data().map(|d| g.leaf(d));
    Ok((g, Slots { theta, phi, data }))
}

fn selected(g: &mut Graph, out: Var, slots: Slots, wrt: Player) -> Result<Vec<f64>> {
    match wrt {
        Player::Theta => Ok(g.grad_values(out, &[slots.theta])?.remove(0)),
        Player::Phi => Ok(g.grad_values(out, &[slots.phi])?.remove(0)),
        Player::All => {
            let mut gs = g.grad_values(out, &[slots.theta, slots.phi])?;
            let phi = gs.pop().unwrap_or_default();
            let mut theta = gs.pop().unwrap_or_default();
            theta.extend(phi);
            Ok(theta)
        }
    }
}

/// `∇_wrt loss(at)`.
pub fn grad<L: ScalarLoss + ?Sized>(loss: &L, at: &ParamVector, wrt: Player) -> Result<Vec<f64>> {
    let (mut g, slots) = setup(loss, at)?;
    let out = loss.build(&mut g, slots);
    selected(&mut g, out, slots, wrt)
}

/// Value of the loss at `at`.
pub fn eval<L: ScalarLoss + ?Sized>(loss: &L, at: &ParamVector) -> Result<f64> {
    let (mut g, slots) = setup(loss, at)?;
    let out = loss.build(&mut g, slots);
    g.scalar(out)
}

/// `∇_wrt ½‖∇_inner f(at)‖²`, differentiating through the inner gradient.
pub fn grad_through_grad<L: ScalarLoss + ?Sized>(
    inner: &L,
    at: &ParamVector,
    inner_slot: InnerSlot,
    wrt: Player,
) -> Result<Vec<f64>> {
    let (mut g, slots) = setup(inner, at)?;
    let f = inner.build(&mut g, slots);
    let inner_wrt: Vec<Var> = match inner_slot {
        InnerSlot::Params(Player::Theta) => vec![slots.theta],
        InnerSlot::Params(Player::Phi) => vec![slots.phi],
        InnerSlot::Params(Player::All) => vec![slots.theta, slots.phi],
        InnerSlot::Data => vec![slots.data.ok_or_else(|| {
            Error::Shape("inner gradient w.r.t. data but the loss has no data slot".into())
        })?],
    };
    let grads = g.grad(f, &inner_wrt)?;
    let mut total = None;
    for gv in grads {
        let sq = g.squared_norm(gv);
        total = Some(match total {
            Some(t) => g.add(t, sq),
            None => sq,
        });
    }
    let total = total.expect("at least one inner slot");
    let outer = g.scale(total, 0.5);
    selected(&mut g, outer, slots, wrt)
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(f: F, at: &ParamVector, h: f64) -> Vec<f64>
where
    F: Fn(&ParamVector) -> f64,
{
    let mut x = at.clone();
    (0..at.len())
        .map(|i| {
            let orig = x.as_slice()[i];
            x.as_mut_slice()[i] = orig + h;
            let fp = f(&x);
            x.as_mut_slice()[i] = orig - h;
            let fm = f(&x);
            x.as_mut_slice()[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
