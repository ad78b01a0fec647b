//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Primal values are computed eagerly when an operation is pushed on the
//! [`Tape`]; each node also records the operation so that a single reverse
//! sweep can accumulate adjoints into the leaves created with
//! `requires_grad`. Broadcasting is limited to a scalar combined with a
//! tensor of any shape.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Rows x columns, stored row-major.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector({n})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r}x{c})"),
        }
    }
}

/// A dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, AdError> {
        if shape.len() != data.len() {
            return Err(AdError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Shape::Scalar,
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single entry of a scalar (or the first entry of anything else).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    #[inline]
    fn at(&self, i: usize) -> f64 {
        if self.shape == Shape::Scalar {
            self.data[0]
        } else {
            self.data[i]
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("non-finite value {value} in leaf entry {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("data of length {len} does not fit shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op} outside its domain at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("reduction over an empty tensor")]
    EmptyReduction,
    #[error("loss must be a scalar, got {0}")]
    NonScalarLoss(Shape),
    #[error("backward already ran on this tape")]
    AlreadySwept,
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
    #[error("index {index} out of range for {shape}")]
    IndexOutOfRange { index: usize, shape: Shape },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Cos,
    Sin,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Cos => "cos",
            Unary::Sin => "sin",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
        }
    }

    fn apply(self, x: f64) -> Result<f64, AdError> {
        Ok(match self {
            Unary::Neg => -x,
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Exp => x.exp(),
            Unary::Log => {
                if x < 0.0 {
                    return Err(AdError::Domain {
                        op: self.name(),
                        value: x,
                    });
                }
                x.ln()
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
            Unary::Sqrt => {
                if x < 0.0 {
                    return Err(AdError::Domain {
                        op: self.name(),
                        value: x,
                    });
                }
                x.sqrt()
            }
            Unary::Abs => x.abs(),
        })
    }

    /// d(out)/d(in) given the input `x` and the cached output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        }
    }

    fn apply(self, a: f64, b: f64) -> Result<f64, AdError> {
        Ok(match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => {
                if b == 0.0 {
                    return Err(AdError::Domain {
                        op: self.name(),
                        value: b,
                    });
                }
                a / b
            }
            // Ties select the left operand, here and in the adjoint.
            Binary::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        })
    }

    /// Partial derivatives with respect to both operands.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            Binary::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Binary::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    LogSumExp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Clamp { arg: usize, lo: f64, hi: f64 },
    MatVec(usize, usize),
    Reduce(Reduce, usize),
    StopGradient(usize),
    Index { arg: usize, at: usize },
    Concat(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any requires-grad leaf reaches this node through
    /// differentiable edges.
    tracks_grad: bool,
}

/// Append-only record of a computation. Node ids are topologically ordered.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
}

/// Adjoints of the requires-grad leaves after a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Variables with no path
    /// to the loss get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.adjoints.get(var.id) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(var.shape),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(sum(exp(xs))). Returns -inf when every entry is -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape, AdError> {
    if a == b {
        Ok(a)
    } else if a == Shape::Scalar {
        Ok(b)
    } else if b == Shape::Scalar {
        Ok(a)
    } else {
        Err(AdError::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

/// Primal evaluation shared by eager construction and replay.
fn evaluate<'a>(op: &Op, value: impl Fn(usize) -> &'a Tensor) -> Result<Tensor, AdError> {
    match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Unary(kind, a) => {
            let x = value(a);
            let data = x
                .data
                .iter()
                .map(|&v| kind.apply(v))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Tensor {
                shape: x.shape,
                data,
            })
        }
        Op::Binary(kind, a, b) => {
            let (x, y) = (value(a), value(b));
            let shape = broadcast(kind.name(), x.shape, y.shape)?;
            let data = (0..shape.len())
                .map(|i| kind.apply(x.at(i), y.at(i)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Tensor { shape, data })
        }
        Op::Clamp { arg, lo, hi } => {
            let x = value(arg);
            Ok(Tensor {
                shape: x.shape,
                data: x.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            })
        }
        Op::MatVec(m, v) => {
            let (m, v) = (value(m), value(v));
            let (rows, cols) = match (m.shape, v.shape) {
                (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => (r, c),
                (lhs, rhs) => {
                    return Err(AdError::ShapeMismatch {
                        op: "matvec",
                        lhs,
                        rhs,
                    })
                }
            };
            let data = m
                .data
                .chunks_exact(cols.max(1))
                .take(rows)
                .map(|row| row.iter().zip(&v.data).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Tensor {
                shape: Shape::Vector(rows),
                data,
            })
        }
        Op::Reduce(kind, a) => {
            let x = value(a);
            if x.data.is_empty() {
                return Err(AdError::EmptyReduction);
            }
            let out = match kind {
                Reduce::Sum => x.data.iter().sum(),
                Reduce::Mean => x.data.iter().sum::<f64>() / x.data.len() as f64,
                Reduce::LogSumExp => logsumexp(&x.data),
            };
            Ok(Tensor::scalar(out))
        }
        Op::StopGradient(a) => Ok(value(a).clone()),
        Op::Index { arg, at } => {
            let x = value(arg);
            if at >= x.data.len() {
                return Err(AdError::IndexOutOfRange {
                    index: at,
                    shape: x.shape,
                });
            }
            Ok(Tensor::scalar(x.data[at]))
        }
        Op::Concat(ref parts) => {
            let mut data = Vec::new();
            for &p in parts {
                let t = value(p);
                if let Shape::Matrix(..) = t.shape {
                    return Err(AdError::ShapeMismatch {
                        op: "concat",
                        lhs: t.shape,
                        rhs: Shape::Vector(0),
                    });
                }
                data.extend_from_slice(&t.data);
            }
            Ok(Tensor::vector(data))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.id].value
    }

    /// Scalar primal value (first entry for non-scalars).
    pub fn item(&self, var: Var) -> f64 {
        self.nodes[var.id].value.data[0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AdError> {
        if let Some((index, &value)) = value.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AdError::NonFinite { index, value });
        }
        Ok(self.push_node(Op::Leaf, value, requires_grad))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AdError> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, x: f64) -> Result<Var, AdError> {
        self.constant(Tensor::scalar(x))
    }

    fn push_node(&mut self, op: Op, value: Tensor, tracks_grad: bool) -> Var {
        let shape = value.shape;
        self.nodes.push(Node {
            op,
            value,
            tracks_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            shape,
        }
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        match self.nodes.get(v.id) {
            Some(node) if node.value.shape == v.shape => Ok(v.id),
            _ => Err(AdError::ForeignVar(v.id)),
        }
    }

    fn push(&mut self, op: Op, inputs: &[usize]) -> Result<Var, AdError> {
        let value = evaluate(&op, |i| &self.nodes[i].value)?;
        let tracks = !matches!(op, Op::StopGradient(_))
            && inputs.iter().any(|&i| self.nodes[i].tracks_grad);
        Ok(self.push_node(op, value, tracks))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Unary(kind, a), &[a])
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Binary(kind, a, b), &[a, b])
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Reduce(kind, a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Min, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(Binary::Max, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Neg, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Cos, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Sin, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(Unary::Abs, a)
    }

    /// Identity inside `[lo, hi]` (boundaries included), zero gradient outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Clamp { arg: a, lo, hi }, &[a])
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, AdError> {
        let (m, v) = (self.check(m)?, self.check(v)?);
        self.push(Op::MatVec(m, v), &[m, v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        self.reduce(Reduce::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        self.reduce(Reduce::Mean, a)
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var, AdError> {
        self.reduce(Reduce::LogSumExp, a)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::StopGradient(a), &[a])
    }

    pub fn index(&mut self, a: Var, at: usize) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Index { arg: a, at }, &[a])
    }

    /// Flattens scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        self.push(Op::Concat(ids.clone()), &ids)
    }

    /// Recomputes every non-leaf primal from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>, AdError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Single reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AdError> {
        Ok(self.backward_many(&[loss])?.remove(0))
    }

    /// Gradients of several scalar losses from one call. Counts as the
    /// tape's single sweep.
    pub fn backward_many(&mut self, losses: &[Var]) -> Result<Vec<Gradients>, AdError> {
        for &loss in losses {
            self.check(loss)?;
            if loss.shape != Shape::Scalar {
                return Err(AdError::NonScalarLoss(loss.shape));
            }
        }
        if self.swept {
            return Err(AdError::AlreadySwept);
        }
        self.swept = true;
        Ok(losses.iter().map(|&loss| self.sweep(loss.id)).collect())
    }

    fn sweep(&self, root: usize) -> Gradients {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.tracks_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let adjoints = adj
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match (g, &node.op) {
                    (Some(data), Op::Leaf) if node.tracks_grad => Some(Tensor {
                        shape: node.value.shape,
                        data,
                    }),
                    _ => None,
                }
            })
            .collect();
        Gradients { adjoints }
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut accumulate = |target: usize, contrib: &dyn Fn(usize) -> f64| {
            let t = &nodes[target];
            if !t.tracks_grad {
                return;
            }
            let len = t.value.data.len();
            let slot = adj[target].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += contrib(i);
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = &nodes[a].value.data;
                let y = &node.value.data;
                accumulate(a, &|i| g[i] * kind.derivative(x[i], y[i]));
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (&nodes[a].value, &nodes[b].value);
                let n = node.value.data.len();
                let partials: Vec<(f64, f64)> =
                    (0..n).map(|k| kind.partials(x.at(k), y.at(k))).collect();
                // A broadcast scalar operand collects the sum over all entries.
                if x.shape == Shape::Scalar && n != 1 {
                    let total: f64 = (0..n).map(|k| g[k] * partials[k].0).sum();
                    accumulate(a, &|_| total);
                } else {
                    accumulate(a, &|i| g[i] * partials[i].0);
                }
                if y.shape == Shape::Scalar && n != 1 {
                    let total: f64 = (0..n).map(|k| g[k] * partials[k].1).sum();
                    accumulate(b, &|_| total);
                } else {
                    accumulate(b, &|i| g[i] * partials[i].1);
                }
            }
            Op::Clamp { arg, lo, hi } => {
                let x = &nodes[arg].value.data;
                accumulate(arg, &|i| if x[i] >= lo && x[i] <= hi { g[i] } else { 0.0 });
            }
            Op::MatVec(m, v) => {
                let (mv, vv) = (&nodes[m].value, &nodes[v].value);
                let cols = vv.data.len();
                accumulate(m, &|k| g[k / cols] * vv.data[k % cols]);
                accumulate(v, &|j| {
                    g.iter()
                        .enumerate()
                        .map(|(r, gr)| gr * mv.data[r * cols + j])
                        .sum()
                });
            }
            Op::Reduce(kind, a) => {
                let x = &nodes[a].value.data;
                let g0 = g[0];
                match kind {
                    Reduce::Sum => accumulate(a, &|_| g0),
                    Reduce::Mean => {
                        let n = x.len() as f64;
                        accumulate(a, &|_| g0 / n)
                    }
                    Reduce::LogSumExp => {
                        let lse = node.value.data[0];
                        accumulate(a, &|i| g0 * (x[i] - lse).exp())
                    }
                }
            }
            Op::StopGradient(_) => {}
            Op::Index { arg, at } => {
                let g0 = g[0];
                accumulate(arg, &|i| if i == at { g0 } else { 0.0 });
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.data.len();
                    let start = offset;
                    accumulate(p, &|i| g[start + i]);
                    offset += len;
                }
            }
        }
    }
}
