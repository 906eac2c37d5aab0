//! Operation recording and the reverse sweep.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{
    self, concat_last, matmul_backward, matmul_forward, matmul_plan, reduce_to, split_last,
    transpose_last, zip_broadcast, MatMulPlan, Tensor,
};
use super::TensorError;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize, MatMulPlan),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize),
    Transpose(usize),
    Broadcast(usize),
    Sum(usize),
    SumLast(usize),
    Mean(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a single forward pass for reverse-mode differentiation.
///
/// Every operation appends a node whose parents were recorded earlier, so
/// the node list is already in topological order and the backward sweep is a
/// plain reverse iteration. A tape is meant to be used for one forward and
/// one backward pass and then dropped; it is `!Sync` and stays on the thread
/// that created it.
pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that no gradient flows into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        self.check(v);
        Ref::map(self.nodes.borrow(), |n| &n[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && !value.is_finite() {
            let parents_finite = parents(&op).iter().all(|&p| nodes[p].value.is_finite());
            debug_assert!(
                !parents_finite || matches!(op, Op::Leaf),
                "non-finite output from finite inputs in {op:?}"
            );
        }
        let index = nodes.len();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index }
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Tensor, op: impl FnOnce(usize) -> Op) -> Var {
        self.check(a);
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.index];
            (f(&n.value), n.needs_grad)
        };
        self.push(value, op(a.index), needs_grad)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        self.check(a);
        self.check(b);
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.index], &nodes[b.index]);
            (f(&na.value, &nb.value)?, na.needs_grad || nb.needs_grad)
        };
        Ok(self.push(value, op(a.index, b.index), needs_grad))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (plan, shape) = matmul_plan(&self.shape(a), &self.shape(b))?;
        self.binary(
            a,
            b,
            |x, y| Ok(matmul_forward(x, y, plan, shape)),
            |i, j| Op::MatMul(i, j, plan),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| zip_broadcast("add", x, y, |p, q| p + q), Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| zip_broadcast("sub", x, y, |p, q| p - q), Op::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| zip_broadcast("mul", x, y, |p, q| p * q), Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| zip_broadcast("div", x, y, |p, q| p / q), Op::Div)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, |t| t.map(|v| v * factor), |i| Op::Scale(i, factor))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Concatenates along the last axis.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, concat_last, Op::Concat)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: self.shape(a),
                rhs: Vec::new(),
            });
        }
        Ok(self.unary(a, transpose_last, Op::Transpose))
    }

    /// Expands `a` to `shape`, repeating along size-1 or missing axes.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let src = self.shape(a);
        match tensor::broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: src,
                    rhs: shape.to_vec(),
                })
            }
        }
        let target = Tensor::zeros(shape);
        Ok(self.unary(
            a,
            |t| zip_broadcast("broadcast", t, &target, |p, _| p).expect("checked above"),
            Op::Broadcast,
        ))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.data().iter().sum()), Op::Sum)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&self, a: Var) -> Result<Var, TensorError> {
        if self.value(a).rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "sum_last",
                lhs: Vec::new(),
                rhs: Vec::new(),
            });
        }
        Ok(self.unary(
            a,
            |t| {
                let cols = *t.shape().last().expect("rank checked");
                let data = t.data().chunks(cols.max(1)).map(|c| c.iter().sum()).collect();
                let mut shape = t.shape().to_vec();
                *shape.last_mut().expect("rank checked") = 1;
                Tensor::from_parts(shape, data)
            },
            Op::SumLast,
        ))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(
            a,
            |t| Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64),
            Op::Mean,
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(sigmoid), Op::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(f64::tanh), Op::Tanh)
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as 0.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(|v| if v > 0.0 { v } else { 0.0 }), Op::Relu)
    }

    /// `|x|`; the derivative at exactly zero is taken as 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(f64::abs), Op::Abs)
    }

    /// `x · w + b`, with `b` broadcast over the leading axes.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the gradient of every parameter leaf; parameters that do not
    /// influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.check(loss);
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            for (parent, pg) in local_grads(&nodes, node, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.needs_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| Tensor::zeros(n.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b, _) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Concat(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Broadcast(a)
        | Op::Sum(a)
        | Op::SumLast(a)
        | Op::Mean(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Abs(a) => vec![a],
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    match node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b, plan) => {
            let (ga, gb) = matmul_backward(val(a), val(b), g, plan);
            vec![(a, ga), (b, gb)]
        }
        Op::Add(a, b) => vec![(a, reduce_to(g, val(a).shape())), (b, reduce_to(g, val(b).shape()))],
        Op::Sub(a, b) => {
            let gb = reduce_to(g, val(b).shape()).map(|v| -v);
            vec![(a, reduce_to(g, val(a).shape())), (b, gb)]
        }
        Op::Mul(a, b) => {
            let ga = zip_broadcast("mul", g, val(b), |p, q| p * q).expect("forward shapes");
            let gb = zip_broadcast("mul", g, val(a), |p, q| p * q).expect("forward shapes");
            vec![(a, reduce_to(&ga, val(a).shape())), (b, reduce_to(&gb, val(b).shape()))]
        }
        Op::Div(a, b) => {
            let ga = zip_broadcast("div", g, val(b), |p, q| p / q).expect("forward shapes");
            // d(a/b)/db = -(a/b)/b = -out/b
            let t = zip_broadcast("div", &node.value, val(b), |o, q| -o / q).expect("forward shapes");
            let gb = zip_broadcast("mul", g, &t, |p, q| p * q).expect("forward shapes");
            vec![(a, reduce_to(&ga, val(a).shape())), (b, reduce_to(&gb, val(b).shape()))]
        }
        Op::Scale(a, f) => vec![(a, g.map(|v| v * f))],
        Op::Concat(a, b) => {
            let left = *val(a).shape().last().expect("concat rank");
            let (ga, gb) = split_last(g, left);
            vec![(a, ga), (b, gb)]
        }
        Op::Transpose(a) => vec![(a, transpose_last(g))],
        Op::Broadcast(a) => vec![(a, reduce_to(g, val(a).shape()))],
        Op::Sum(a) => {
            let s = g.data()[0];
            vec![(a, Tensor::full(val(a).shape(), s))]
        }
        Op::SumLast(a) => {
            let x = val(a);
            let cols = *x.shape().last().expect("rank checked");
            let mut data = Vec::with_capacity(x.len());
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv, cols));
            }
            vec![(a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Mean(a) => {
            let x = val(a);
            let s = g.data()[0] / x.len() as f64;
            vec![(a, Tensor::full(x.shape(), s))]
        }
        Op::Sigmoid(a) => vec![(a, elementwise(g, &node.value, |gv, y| gv * y * (1.0 - y)))],
        Op::Tanh(a) => vec![(a, elementwise(g, &node.value, |gv, y| gv * (1.0 - y * y)))],
        Op::Relu(a) => vec![(a, elementwise(g, val(a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Abs(a) => vec![(
            a,
            elementwise(g, val(a), |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        )],
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf, `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
