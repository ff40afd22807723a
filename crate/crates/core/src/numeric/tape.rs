//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Tape`] records every operation eagerly: each node stores its forward
//! value as soon as it is pushed. Gradients are obtained by seeding an output
//! node and walking the node list backwards. Because nodes are appended in
//! evaluation order, ids are already topologically sorted.
//!
//! The vocabulary is deliberately small (see [`Op`]). Anything outside it can
//! be recorded with [`Tape::opaque`] so that its value participates in the
//! forward pass, but differentiating through such a node is an error.

use super::{Matrix, NumericError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    SelectRows(NodeId, Vec<usize>),
    Transpose(NodeId),
    /// Frobenius inner product, producing a 1×1 matrix.
    Dot(NodeId, NodeId),
    /// Value computed outside the vocabulary. Replay keeps the cached value.
    Opaque { name: String, inputs: Vec<NodeId> },
}

impl Op {
    pub fn tag(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Tanh(..) => "tanh",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Transpose(..) => "transpose",
            Op::Dot(..) => "dot",
            Op::Opaque { name, .. } => name,
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::L2NormalizeRows(a)
            | Op::SelectRows(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::Opaque { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Option<NodeId>,
}

/// Adjoints for every node reached by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zero when the node did not influence the output.
    pub fn get(&self, id: NodeId) -> Matrix {
        match self.adjoints.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn eval<'a>(op: &Op, values: impl Fn(NodeId) -> &'a Matrix) -> Result<Matrix, NumericError> {
    let out = match op {
        Op::Leaf | Op::Constant | Op::Opaque { .. } => unreachable!("inputs are not evaluated"),
        Op::MatMul(a, b) => values(*a).matmul(values(*b))?,
        Op::Add(a, b) => values(*a).add(values(*b))?,
        Op::Tanh(a) => values(*a).map(f64::tanh),
        Op::Scale(a, s) => values(*a).scale(*s),
        Op::SoftmaxRows(a) => values(*a).softmax_rows(),
        Op::L2NormalizeRows(a) => values(*a).l2_normalize_rows()?,
        Op::SelectRows(a, idx) => values(*a).select_rows(idx)?,
        Op::Transpose(a) => values(*a).transpose(),
        Op::Dot(a, b) => Matrix::row_vector(&[values(*a).dot(values(*b))?]),
    };
    if !out.is_finite() {
        return Err(NumericError::NonFinite { op: op.tag().to_string() });
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id.0).map(|n| &n.op), Some(Op::Leaf))
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    fn check_input(&self, id: NodeId) -> Result<(), NumericError> {
        if id.0 >= self.nodes.len() {
            return Err(NumericError::UnknownNode(id.0));
        }
        Ok(())
    }

    fn push_input(&mut self, op: Op, value: Matrix) -> Result<NodeId, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op.tag().to_string() });
        }
        let requires_grad = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Matrix) -> Result<NodeId, NumericError> {
        self.push_input(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<NodeId, NumericError> {
        self.push_input(Op::Constant, value)
    }

    /// Records a value computed outside the op vocabulary.
    pub fn opaque(&mut self, name: &str, inputs: &[NodeId], value: Matrix) -> Result<NodeId, NumericError> {
        for i in inputs {
            self.check_input(*i)?;
        }
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: name.to_string() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op: Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NumericError> {
        let inputs = op.inputs();
        for i in &inputs {
            self.check_input(*i)?;
        }
        let value = eval(&op, |id| &self.nodes[id.0].value)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Add(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Tanh(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, NumericError> {
        self.push(Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::L2NormalizeRows(a))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, NumericError> {
        self.push(Op::SelectRows(a, rows))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Transpose(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Dot(a, b))
    }

    /// `a + 1·bias` where `bias` is a 1×n row, expressed as a rank-one matmul.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        let rows = self.value(a).rows();
        let ones = self.constant(Matrix::filled(rows, 1, 1.0))?;
        let spread = self.matmul(ones, bias)?;
        self.add(a, spread)
    }

    /// Vertically stacks nodes with equal column counts by summing
    /// placement products `E_i · part_i`.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::Empty("stack_rows"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut offset = 0;
        let mut acc: Option<NodeId> = None;
        for &p in parts {
            let r = self.value(p).rows();
            let mut placement = Matrix::zeros(total, r);
            for i in 0..r {
                placement.set(offset + i, i, 1.0);
            }
            offset += r;
            let e = self.constant(placement)?;
            let placed = self.matmul(e, p)?;
            acc = Some(match acc {
                None => placed,
                Some(prev) => self.add(prev, placed)?,
            });
        }
        Ok(acc.expect("nonempty"))
    }

    /// Recomputes every forward value with `overrides` substituted for the
    /// given input nodes. Opaque nodes keep their cached values.
    pub fn replay(&self, overrides: &[(NodeId, &Matrix)]) -> Result<Vec<Matrix>, NumericError> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf | Op::Constant => match overrides.iter().find(|(id, _)| id.0 == i) {
                    Some((_, m)) => {
                        if m.shape() != node.value.shape() {
                            return Err(NumericError::ShapeMismatch {
                                op: "replay",
                                left: node.value.shape(),
                                right: m.shape(),
                            });
                        }
                        (*m).clone()
                    }
                    None => node.value.clone(),
                },
                Op::Opaque { .. } => node.value.clone(),
                op => eval(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Backpropagates `seed` (shaped like `output`) through the tape.
    pub fn backward(&self, output: NodeId, seed: &Matrix) -> Result<Gradients, NumericError> {
        self.check_input(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(NumericError::ShapeMismatch {
                op: "backward seed",
                left: out_shape,
                right: seed.shape(),
            });
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.clone());

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let contributions = self.local_grads(&node.op, &node.value, &g)?;
            adj[i] = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(existing) => existing.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_grads(&self, op: &Op, out: &Matrix, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>, NumericError> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        Ok(match op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if needs(*a) {
                    v.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if needs(*b) {
                    v.push((*b, val(*a).transpose().matmul(g)?));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Tanh(a) => vec![(*a, g.hadamard(&out.map(|y| 1.0 - y * y))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = y[j] * (gr[j] - inner);
                    }
                }
                vec![(*a, dx)]
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let norm = super::matrix::norm(x.row(r));
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[j] - y[j] * inner) / norm;
                    }
                }
                vec![(*a, dx)]
            }
            Op::SelectRows(a, idx) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Dot(a, b) => {
                let s = g.data()[0];
                vec![(*a, val(*b).scale(s)), (*b, val(*a).scale(s))]
            }
            Op::Opaque { name, .. } => return Err(NumericError::UnsupportedOp(name.clone())),
        })
    }
}

/// ∂(output)/∂(leaf) for a tape whose output node holds a scalar.
pub fn grad(tape: &Tape, leaf: NodeId) -> Result<Matrix, NumericError> {
    if !tape.is_leaf(leaf) {
        return Err(NumericError::NotALeaf(leaf.0));
    }
    let output = tape.output().ok_or(NumericError::NoOutput)?;
    if tape.value(output).scalar().is_none() {
        return Err(NumericError::NonScalarOutput(tape.value(output).shape()));
    }
    Ok(tape.backward(output, &Matrix::filled(1, 1, 1.0))?.get(leaf))
}
