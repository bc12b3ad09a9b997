//! Op-recording graph and the reverse sweep.
//!
//! A `Graph` is confined to one execution context (no `Sync`); independent
//! graphs can run on independent threads. Nodes are appended in execution
//! order, so the node list is already a topological order and backward is a
//! single reverse sweep that visits each node exactly once.

use std::cell::RefCell;

use super::{fmt_shape, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(pub(crate) usize);

pub(crate) struct NodeData {
    pub value: Tensor,
    /// True when some `requires_grad` leaf feeds this node.
    pub needs_grad: bool,
    pub rule: Option<Box<dyn Backward>>,
}

/// Backward rule for one recorded op: reads values, accumulates into grads.
pub(crate) trait Backward {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out_grad: &Tensor);
}

pub(crate) struct BackwardCtx<'a> {
    nodes: &'a [NodeData],
    grads: &'a mut [Option<Tensor>],
}

impl BackwardCtx<'_> {
    pub fn value(&self, n: Node) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn needs(&self, n: Node) -> bool {
        self.nodes[n.0].needs_grad
    }

    /// Add `contribution` to the gradient of `n` (skipped when `n` is not on
    /// any path to a `requires_grad` leaf).
    pub fn accumulate(&mut self, n: Node, contribution: Tensor) {
        if !self.needs(n) {
            return;
        }
        debug_assert_eq!(self.nodes[n.0].value.shape(), contribution.shape());
        match &mut self.grads[n.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<NodeData>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf value. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Node {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(NodeData { value, needs_grad: requires_grad, rule: None });
        Node(nodes.len() - 1)
    }

    /// Insert a value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Node {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: Real) -> Node {
        self.constant(Tensor::scalar(v))
    }

    /// Identity in the forward direction; blocks all gradient flow into the
    /// subgraph that produced `n`.
    pub fn stop_gradient(&self, n: Node) -> Node {
        let value = self.value(n);
        self.constant(value)
    }

    /// Detach the node's value as a plain tensor.
    pub fn value(&self, n: Node) -> Tensor {
        self.nodes.borrow()[n.0].value.clone()
    }

    pub fn shape_of(&self, n: Node) -> Vec<usize> {
        self.nodes.borrow()[n.0].value.shape().to_vec()
    }

    pub fn with_value<T>(&self, n: Node, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[n.0].value)
    }

    /// Gradient of the last `backward` call w.r.t. node `n`, if any reached it.
    pub fn grad(&self, n: Node) -> Option<Tensor> {
        self.grads.borrow().get(n.0).and_then(|g| g.clone())
    }

    /// Record an op node. Checks the produced value for NaN/Inf; a rule is
    /// only kept when some input needs gradients.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[Node],
        rule: Box<dyn Backward>,
    ) -> Result<Node> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op, detail: String::new() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|n| nodes[n.0].needs_grad);
        nodes.push(NodeData {
            value,
            needs_grad,
            rule: if needs_grad { Some(rule) } else { None },
        });
        Ok(Node(nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&self, loss: Node) -> Result<()> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(nodes[loss.0].value.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(out_grad) = grads[id].take() else { continue };
            if let Some(rule) = &nodes[id].rule {
                let mut ctx = BackwardCtx { nodes: &nodes, grads: &mut grads };
                rule.backward(&mut ctx, &out_grad);
            }
            // Leaves keep their gradient; interior grads are dropped above
            // via take() once consumed.
            if nodes[id].rule.is_none() {
                grads[id] = Some(out_grad);
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

// ── elementwise binary ──────────────────────────────────────────────

struct BinaryRule {
    a: Node,
    b: Node,
    kind: BinKind,
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Backward for BinaryRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        match self.kind {
            BinKind::Add => {
                ctx.accumulate(self.a, g.clone());
                ctx.accumulate(self.b, g.clone());
            }
            BinKind::Sub => {
                ctx.accumulate(self.a, g.clone());
                ctx.accumulate(self.b, g.scale(-1.0));
            }
            BinKind::Mul => {
                let (av, bv) = (ctx.value(self.a).clone(), ctx.value(self.b).clone());
                ctx.accumulate(self.a, g.mul(&bv).expect("shape"));
                ctx.accumulate(self.b, g.mul(&av).expect("shape"));
            }
            BinKind::Div => {
                let (av, bv) = (ctx.value(self.a).clone(), ctx.value(self.b).clone());
                let da = g.zip_map(&bv, "div", |g, b| g / b).expect("shape");
                let db = Tensor::from_fn(g.shape().to_vec(), |i| {
                    -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i])
                });
                ctx.accumulate(self.a, da);
                ctx.accumulate(self.b, db);
            }
        }
    }
}

// ── elementwise unary ───────────────────────────────────────────────

struct UnaryRule {
    x: Node,
    out: Node,
    kind: UnKind,
}

enum UnKind {
    Neg,
    Scale(Real),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Silu,
    Gelu,
}

impl Backward for UnaryRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let dx = match self.kind {
            UnKind::Neg => g.scale(-1.0),
            UnKind::Scale(c) => g.scale(c),
            UnKind::AddScalar => g.clone(),
            UnKind::Exp => {
                let y = ctx.value(self.out).clone();
                g.mul(&y).expect("shape")
            }
            UnKind::Log => {
                let x = ctx.value(self.x).clone();
                g.zip_map(&x, "log", |g, x| g / x).expect("shape")
            }
            UnKind::Sqrt => {
                let y = ctx.value(self.out).clone();
                g.zip_map(&y, "sqrt", |g, y| 0.5 * g / y).expect("shape")
            }
            UnKind::Sigmoid => {
                let y = ctx.value(self.out).clone();
                g.zip_map(&y, "sigmoid", |g, y| g * y * (1.0 - y)).expect("shape")
            }
            UnKind::Silu => {
                let x = ctx.value(self.x).clone();
                g.zip_map(&x, "silu", |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .expect("shape")
            }
            UnKind::Gelu => {
                let x = ctx.value(self.x).clone();
                g.zip_map(&x, "gelu", |g, x| g * gelu_grad(x)).expect("shape")
            }
        };
        ctx.accumulate(self.x, dx);
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu_value(x: Real) -> Real {
    0.5 * x * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real)
}

fn gelu_grad(x: Real) -> Real {
    let phi = 0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real);
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI as Real).sqrt();
    phi + x * pdf
}

// ── reductions ──────────────────────────────────────────────────────

struct ReduceRule {
    x: Node,
    factor: Real,
}

impl Backward for ReduceRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let shape = ctx.value(self.x).shape().to_vec();
        let gv = g.item() * self.factor;
        ctx.accumulate(self.x, Tensor::full(shape, gv));
    }
}

impl Graph {
    fn binary(&self, op: &'static str, a: Node, b: Node, kind: BinKind) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            match kind {
                BinKind::Add => av.add(bv)?,
                BinKind::Sub => av.sub(bv)?,
                BinKind::Mul => av.mul(bv)?,
                BinKind::Div => av.zip_map(bv, "div", |a, b| a / b)?,
            }
        };
        self.push(op, value, &[a, b], Box::new(BinaryRule { a, b, kind }))
    }

    pub fn add(&self, a: Node, b: Node) -> Result<Node> {
        self.binary("add", a, b, BinKind::Add)
    }

    pub fn sub(&self, a: Node, b: Node) -> Result<Node> {
        self.binary("sub", a, b, BinKind::Sub)
    }

    pub fn mul(&self, a: Node, b: Node) -> Result<Node> {
        self.binary("mul", a, b, BinKind::Mul)
    }

    pub fn div(&self, a: Node, b: Node) -> Result<Node> {
        self.binary("div", a, b, BinKind::Div)
    }

    fn unary(&self, op: &'static str, x: Node, kind: UnKind, f: impl Fn(Real) -> Real) -> Result<Node> {
        let value = self.nodes.borrow()[x.0].value.map(f);
        let out = Node(self.len());
        self.push(op, value, &[x], Box::new(UnaryRule { x, out, kind }))
    }

    pub fn neg(&self, x: Node) -> Result<Node> {
        self.unary("neg", x, UnKind::Neg, |v| -v)
    }

    pub fn scale(&self, x: Node, c: Real) -> Result<Node> {
        self.unary("scale", x, UnKind::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, x: Node, c: Real) -> Result<Node> {
        self.unary("add_scalar", x, UnKind::AddScalar, |v| v + c)
    }

    pub fn exp(&self, x: Node) -> Result<Node> {
        self.unary("exp", x, UnKind::Exp, |v| v.exp())
    }

    pub fn log(&self, x: Node) -> Result<Node> {
        self.unary("log", x, UnKind::Log, |v| v.ln())
    }

    pub fn sqrt(&self, x: Node) -> Result<Node> {
        self.unary("sqrt", x, UnKind::Sqrt, |v| v.sqrt())
    }

    pub fn sigmoid(&self, x: Node) -> Result<Node> {
        self.unary("sigmoid", x, UnKind::Sigmoid, sigmoid)
    }

    pub fn silu(&self, x: Node) -> Result<Node> {
        self.unary("silu", x, UnKind::Silu, |v| v * sigmoid(v))
    }

    pub fn gelu(&self, x: Node) -> Result<Node> {
        self.unary("gelu", x, UnKind::Gelu, gelu_value)
    }

    pub fn sum_all(&self, x: Node) -> Result<Node> {
        let value = Tensor::scalar(self.nodes.borrow()[x.0].value.sum());
        self.push("sum", value, &[x], Box::new(ReduceRule { x, factor: 1.0 }))
    }

    pub fn mean_all(&self, x: Node) -> Result<Node> {
        let (value, n) = {
            let nodes = self.nodes.borrow();
            (Tensor::scalar(nodes[x.0].value.mean()), nodes[x.0].value.numel())
        };
        self.push("mean", value, &[x], Box::new(ReduceRule { x, factor: 1.0 / n as Real }))
    }

    /// Elementwise squared difference `(a - b)^2`.
    pub fn squared_error(&self, a: Node, b: Node) -> Result<Node> {
        let d = self.sub(a, b)?;
        self.mul(d, d)
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&self, a: Node, b: Node) -> Result<Node> {
        let se = self.squared_error(a, b)?;
        self.mean_all(se)
    }

    /// `a*x + b` elementwise with scalar constants.
    pub fn affine(&self, x: Node, a: Real, b: Real) -> Result<Node> {
        let s = self.scale(x, a)?;
        self.add_scalar(s, b)
    }
}
