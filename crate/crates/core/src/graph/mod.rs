//! Computation-graph IR for customizable attention functions.
//!
//! Graphs are append-only tables of [`Node`]s. Every node records its
//! primitive, its operand ids, the inferred tensor attributes and an optional
//! link to the node holding its gradient. Because operands must already exist
//! when a node is appended, node ids are a topological order by construction.
//!
//! All placeholder tensors are rank 2 (`[rows, cols]`); constants are rank 0
//! and broadcast against anything.

mod analysis;
mod autodiff;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::Liveness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Batch,
    Heads,
    SeqQ,
    SeqK,
    DimQK,
    DimV,
    One,
}

/// A named tensor axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dim {
    kind: DimKind,
    extent: usize,
}

impl Dim {
    pub fn new(kind: DimKind, extent: usize) -> Result<Dim, GraphError> {
        if extent == 0 || (kind == DimKind::One && extent != 1) {
            return Err(GraphError::InvalidDim { kind, extent });
        }
        Ok(Dim { kind, extent })
    }

    /// Panicking constructor for extents already validated upstream.
    pub fn of(kind: DimKind, extent: usize) -> Dim {
        Dim::new(kind, extent).expect("dimension extent must be positive")
    }

    pub const fn one() -> Dim {
        Dim { kind: DimKind::One, extent: 1 }
    }

    pub fn kind(&self) -> DimKind {
        self.kind
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    fn broadcastable(&self) -> bool {
        self.extent == 1
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            DimKind::Batch => "B",
            DimKind::Heads => "H",
            DimKind::SeqQ => "Sq",
            DimKind::SeqK => "Sk",
            DimKind::DimQK => "Dqk",
            DimKind::DimV => "Dv",
            DimKind::One => return f.write_str("1"),
        };
        write!(f, "{tag}:{}", self.extent)
    }
}

pub type Shape = Vec<Dim>;

pub fn shape_to_string(shape: &[Dim]) -> String {
    let parts: Vec<String> = shape.iter().map(Dim::to_string).collect();
    format!("[{}]", parts.join(", "))
}

pub fn extents(shape: &[Dim]) -> Vec<usize> {
    shape.iter().map(Dim::extent).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    Input,
    Intermediate,
    Output,
    Grad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorAttr {
    pub shape: Shape,
    pub role: TensorRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Elementwise,
    RowReduce,
    /// Template-fixed structure: placeholders, matmuls, transposes, row
    /// gather/scatter and the max-indicator used by autodiff.
    Structural,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Exp2,
    Log,
    Abs,
    Tanh,
    Sigmoid,
    Sqrt,
    Max,
    Min,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `where(cond, a, b)`; any nonzero condition selects `a`.
    Where,
    Const(f64),
    Broadcast(Shape),
    /// Comparison producing 1.0 / 0.0.
    Cmp(CmpOp),
    ReduceSum,
    ReduceMax,
    ReduceAbssum,
    Input(String),
    MatMul,
    Transpose,
    /// Gather one row: `[S, D] -> [1, D]`.
    Row(usize),
    /// Place a single row into an otherwise-zero `[rows, D]` tensor.
    ScatterRow {
        index: usize,
        rows: Dim,
    },
    /// One-hot indicator of the first maximal element of each row.
    FirstMaxMask,
}

impl PrimitiveKind {
    pub fn class(&self) -> OpClass {
        use PrimitiveKind::*;
        match self {
            Add
            | Sub
            | Mul
            | Div
            | Neg
            | Exp
            | Exp2
            | Log
            | Abs
            | Tanh
            | Sigmoid
            | Sqrt
            | Max
            | Min
            | Clamp { .. }
            | Where
            | Const(_)
            | Broadcast(_)
            | Cmp(_) => OpClass::Elementwise,
            ReduceSum | ReduceMax | ReduceAbssum => OpClass::RowReduce,
            Input(_) | MatMul | Transpose | Row(_) | ScatterRow { .. } | FirstMaxMask => OpClass::Structural,
        }
    }

    pub fn is_row_reduce(&self) -> bool {
        self.class() == OpClass::RowReduce
    }

    pub fn arity(&self) -> usize {
        use PrimitiveKind::*;
        match self {
            Const(_) | Input(_) => 0,
            Neg
            | Exp
            | Exp2
            | Log
            | Abs
            | Tanh
            | Sigmoid
            | Sqrt
            | Clamp { .. }
            | Broadcast(_)
            | ReduceSum
            | ReduceMax
            | ReduceAbssum
            | Transpose
            | Row(_)
            | ScatterRow { .. }
            | FirstMaxMask => 1,
            Add | Sub | Mul | Div | Max | Min | Cmp(_) | MatMul => 2,
            Where => 3,
        }
    }

    /// Short lowercase mnemonic, used in diagnostics and emitted kernels.
    pub fn mnemonic(&self) -> &'static str {
        use PrimitiveKind::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Neg => "neg",
            Exp => "exp",
            Exp2 => "exp2",
            Log => "log",
            Abs => "abs",
            Tanh => "tanh",
            Sigmoid => "sigmoid",
            Sqrt => "sqrt",
            Max => "max",
            Min => "min",
            Clamp { .. } => "clamp",
            Where => "where",
            Const(_) => "const",
            Broadcast(_) => "broadcast",
            Cmp(_) => "cmp",
            ReduceSum => "reduce_sum",
            ReduceMax => "reduce_max",
            ReduceAbssum => "reduce_abssum",
            Input(_) => "input",
            MatMul => "matmul",
            Transpose => "transpose",
            Row(_) => "row",
            ScatterRow { .. } => "scatter_row",
            FirstMaxMask => "first_max_mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: PrimitiveKind,
    pub inputs: Vec<NodeId>,
    pub attr: TensorAttr,
    pub grad: Option<NodeId>,
}

impl Node {
    pub fn shape(&self) -> &[Dim] {
        &self.attr.shape
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid dimension {kind:?} with extent {extent}")]
    InvalidDim { kind: DimKind, extent: usize },
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("{op} expects {expected} operand(s), got {got}")]
    ArityMismatch { op: &'static str, expected: usize, got: usize },
    #[error("unknown input node {0}")]
    UnknownInput(NodeId),
    #[error("placeholder `{0}` declared twice")]
    DuplicatePlaceholder(String),
    #[error("placeholder `{name}` must be rank 2, got {rank}")]
    PlaceholderRank { name: String, rank: usize },
    #[error("node {0} is not reachable from the differentiated output")]
    Unreachable(NodeId),
    #[error("cannot reduce gradient of shape {from} to {to}")]
    UnsupportedBroadcast { from: String, to: String },
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    placeholders: Vec<(String, NodeId)>,
    outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[Dim] {
        &self.nodes[id.0].attr.shape
    }

    pub fn placeholders(&self) -> &[(String, NodeId)] {
        &self.placeholders
    }

    pub fn placeholder_id(&self, name: &str) -> Option<NodeId> {
        self.placeholders.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn grad_of(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].grad
    }

    pub fn placeholder(&mut self, name: &str, shape: Shape) -> Result<NodeId, GraphError> {
        if self.placeholder_id(name).is_some() {
            return Err(GraphError::DuplicatePlaceholder(name.to_string()));
        }
        if shape.len() != 2 {
            return Err(GraphError::PlaceholderRank { name: name.to_string(), rank: shape.len() });
        }
        let id = self.push(PrimitiveKind::Input(name.to_string()), vec![], shape, TensorRole::Input);
        self.placeholders.push((name.to_string(), id));
        Ok(id)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(PrimitiveKind::Const(value), vec![], vec![], TensorRole::Intermediate)
    }

    /// Appends a node after checking arity and inferring its shape.
    pub fn add_node(&mut self, op: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        self.add_with_role(op, inputs, TensorRole::Intermediate)
    }

    pub(crate) fn add_with_role(
        &mut self,
        op: PrimitiveKind,
        inputs: &[NodeId],
        role: TensorRole,
    ) -> Result<NodeId, GraphError> {
        if matches!(op, PrimitiveKind::Input(_)) {
            // Placeholders go through `placeholder` so the name table stays consistent.
            return Err(GraphError::ArityMismatch { op: "input", expected: 0, got: inputs.len() });
        }
        if inputs.len() != op.arity() {
            return Err(GraphError::ArityMismatch { op: op.mnemonic(), expected: op.arity(), got: inputs.len() });
        }
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(GraphError::UnknownInput(i));
            }
        }
        let shapes: Vec<&[Dim]> = inputs.iter().map(|&i| self.shape(i)).collect();
        let shape = infer_shape(&op, &shapes)?;
        Ok(self.push(op, inputs.to_vec(), shape, role))
    }

    pub fn mark_output(&mut self, id: NodeId) {
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
        if self.nodes[id.0].attr.role == TensorRole::Intermediate {
            self.nodes[id.0].attr.role = TensorRole::Output;
        }
    }

    fn push(&mut self, op: PrimitiveKind, inputs: Vec<NodeId>, shape: Shape, role: TensorRole) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, inputs, attr: TensorAttr { shape, role }, grad: None });
        id
    }

    pub(crate) fn set_grad(&mut self, id: NodeId, grad: NodeId) {
        self.nodes[id.0].grad = Some(grad);
    }

    /// Nodes the given node transitively depends on, including itself.
    pub fn ancestors(&self, id: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(self.nodes[n.0].inputs.iter().copied());
        }
        seen
    }

    /// Whether any node of the given class feeds `id`.
    pub fn contains_class_upstream(&self, id: NodeId, class: OpClass) -> bool {
        self.ancestors(id).iter().enumerate().any(|(i, &a)| a && self.nodes[i].op.class() == class)
    }
}

/// Broadcast two shapes: equal extents pass through, extent-1 axes stretch and
/// rank-0 constants match anything. Ranks otherwise have to agree.
pub fn broadcast_shapes(op: &'static str, a: &[Dim], b: &[Dim]) -> Result<Shape, GraphError> {
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    let mismatch = || GraphError::ShapeMismatch { op, lhs: shape_to_string(a), rhs: shape_to_string(b) };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.extent == y.extent && (x.kind == y.kind || x.broadcastable()) {
                Ok(if x.kind == DimKind::One { *y } else { *x })
            } else if x.broadcastable() {
                Ok(*y)
            } else if y.broadcastable() {
                Ok(*x)
            } else {
                Err(mismatch())
            }
        })
        .collect()
}

fn infer_shape(op: &PrimitiveKind, shapes: &[&[Dim]]) -> Result<Shape, GraphError> {
    use PrimitiveKind::*;
    let name = op.mnemonic();
    let mismatch =
        |a: &[Dim], b: &[Dim]| GraphError::ShapeMismatch { op: name, lhs: shape_to_string(a), rhs: shape_to_string(b) };
    match op {
        Const(_) | Input(_) => Ok(vec![]),
        Add | Sub | Mul | Div | Max | Min | Cmp(_) => broadcast_shapes(name, shapes[0], shapes[1]),
        Where => {
            let ab = broadcast_shapes(name, shapes[1], shapes[2])?;
            broadcast_shapes(name, shapes[0], &ab)
        }
        Neg | Exp | Exp2 | Log | Abs | Tanh | Sigmoid | Sqrt | Clamp { .. } | FirstMaxMask => {
            if matches!(op, FirstMaxMask) && shapes[0].is_empty() {
                return Err(mismatch(shapes[0], &[]));
            }
            Ok(shapes[0].to_vec())
        }
        Broadcast(target) => {
            let out = broadcast_shapes(name, shapes[0], target)?;
            if extents(&out) != extents(target) {
                return Err(mismatch(shapes[0], target));
            }
            Ok(target.clone())
        }
        ReduceSum | ReduceMax | ReduceAbssum => {
            let s = shapes[0];
            if s.is_empty() {
                return Err(mismatch(s, &[]));
            }
            let mut out = s.to_vec();
            *out.last_mut().unwrap() = Dim::one();
            Ok(out)
        }
        MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.len() != 2 || b.len() != 2 || a[1].extent != b[0].extent {
                return Err(mismatch(a, b));
            }
            Ok(vec![a[0], b[1]])
        }
        Transpose => {
            let a = shapes[0];
            if a.len() != 2 {
                return Err(mismatch(a, &[]));
            }
            Ok(vec![a[1], a[0]])
        }
        Row(index) => {
            let a = shapes[0];
            if a.len() != 2 || *index >= a[0].extent {
                return Err(mismatch(a, &[]));
            }
            Ok(vec![Dim::one(), a[1]])
        }
        ScatterRow { index, rows } => {
            let a = shapes[0];
            if a.len() != 2 || a[0].extent != 1 || *index >= rows.extent {
                return Err(mismatch(a, &[*rows]));
            }
            Ok(vec![*rows, a[1]])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sd(s: usize, d: usize) -> Shape {
        vec![Dim::of(DimKind::SeqQ, s), Dim::of(DimKind::DimQK, d)]
    }

    #[test]
    fn add_same_shape() {
        let mut g = Graph::new();
        let a = g.placeholder("a", sd(4, 8)).unwrap();
        let b = g.placeholder("b", sd(4, 8)).unwrap();
        let c = g.add_node(PrimitiveKind::Add, &[a, b]).unwrap();
        assert_eq!(g.shape(c), sd(4, 8).as_slice());
    }

    #[test]
    fn reduce_collapses_trailing_dim() {
        let mut g = Graph::new();
        let a = g.placeholder("a", sd(4, 8)).unwrap();
        let r = g.add_node(PrimitiveKind::ReduceSum, &[a]).unwrap();
        assert_eq!(g.shape(r), &[Dim::of(DimKind::SeqQ, 4), Dim::one()]);
    }

    #[test]
    fn row_scale_broadcasts() {
        let mut g = Graph::new();
        let a = g.placeholder("a", sd(4, 8)).unwrap();
        let b = g.placeholder("b", vec![Dim::of(DimKind::SeqQ, 4), Dim::one()]).unwrap();
        let c = g.add_node(PrimitiveKind::Add, &[a, b]).unwrap();
        assert_eq!(g.shape(c), sd(4, 8).as_slice());
        let c2 = g.add_node(PrimitiveKind::Add, &[b, a]).unwrap();
        assert_eq!(g.shape(c2), sd(4, 8).as_slice());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g = Graph::new();
        let a = g.placeholder("a", sd(4, 8)).unwrap();
        let b = g.placeholder("b", sd(4, 6)).unwrap();
        assert!(matches!(g.add_node(PrimitiveKind::Mul, &[a, b]), Err(GraphError::ShapeMismatch { .. })));
        // Same extent but different axis kinds is still a mismatch.
        let k = g.placeholder("k", vec![Dim::of(DimKind::SeqK, 4), Dim::of(DimKind::DimQK, 8)]).unwrap();
        assert!(g.add_node(PrimitiveKind::Add, &[a, k]).is_err());
    }

    #[test]
    fn arity_and_unknown_inputs() {
        let mut g = Graph::new();
        let a = g.placeholder("a", sd(2, 2)).unwrap();
        assert!(matches!(
            g.add_node(PrimitiveKind::Add, &[a]),
            Err(GraphError::ArityMismatch { expected: 2, got: 1, .. })
        ));
        assert!(matches!(g.add_node(PrimitiveKind::Exp, &[NodeId(7)]), Err(GraphError::UnknownInput(NodeId(7)))));
        assert!(g.add_node(PrimitiveKind::Where, &[a, a]).is_err());
    }

    #[test]
    fn invalid_dims() {
        assert!(Dim::new(DimKind::SeqQ, 0).is_err());
        assert!(Dim::new(DimKind::One, 2).is_err());
        assert!(Dim::new(DimKind::One, 1).is_ok());
    }

    #[test]
    fn every_kind_has_one_class() {
        use PrimitiveKind::*;
        let all = [
            Add,
            Sub,
            Mul,
            Div,
            Neg,
            Exp,
            Exp2,
            Log,
            Abs,
            Tanh,
            Sigmoid,
            Sqrt,
            Max,
            Min,
            Clamp { lo: 0.0, hi: 1.0 },
            Where,
            Const(0.0),
            Broadcast(vec![]),
            Cmp(CmpOp::Lt),
            ReduceSum,
            ReduceMax,
            ReduceAbssum,
        ];
        for k in &all {
            let expect_reduce = matches!(k, ReduceSum | ReduceMax | ReduceAbssum);
            assert_eq!(k.is_row_reduce(), expect_reduce, "{k:?}");
            assert_eq!(k.class() == OpClass::Elementwise, !expect_reduce, "{k:?}");
        }
    }

    #[test]
    fn matmul_and_transpose_shapes() {
        let mut g = Graph::new();
        let q = g.placeholder("q", sd(4, 8)).unwrap();
        let k = g.placeholder("k", vec![Dim::of(DimKind::SeqK, 5), Dim::of(DimKind::DimQK, 8)]).unwrap();
        let kt = g.add_node(PrimitiveKind::Transpose, &[k]).unwrap();
        let s = g.add_node(PrimitiveKind::MatMul, &[q, kt]).unwrap();
        assert_eq!(g.shape(s), &[Dim::of(DimKind::SeqQ, 4), Dim::of(DimKind::SeqK, 5)]);
        assert!(g.add_node(PrimitiveKind::MatMul, &[q, k]).is_err());
    }
}
