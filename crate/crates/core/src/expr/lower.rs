use std::collections::HashMap;

use super::{BinOp, Expr, ExprError, Func, UnaryOp};
use crate::engine::{ops, Matrix};
use crate::graph::{Graph, NodeId, PrimitiveKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerContext {
    /// Modification functions: row reductions are rejected.
    ElementwiseOnly,
    RowNormAllowed,
}

/// Names visible to an expression: graph nodes and compile-time constants.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    nodes: HashMap<String, NodeId>,
    constants: HashMap<String, f64>,
}

impl Scope {
    pub fn new() -> Scope {
        Scope::default()
    }

    pub fn bind(&mut self, name: &str, id: NodeId) -> &mut Scope {
        self.nodes.insert(name.to_string(), id);
        self
    }

    pub fn bind_const(&mut self, name: &str, value: f64) -> &mut Scope {
        self.constants.insert(name.to_string(), value);
        self
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name) || self.constants.contains_key(name)
    }
}

#[derive(Clone, Copy)]
enum Value {
    Const(f64),
    Node(NodeId),
}

/// Lowers `expr` into `graph`, folding every all-constant subexpression.
pub fn lower(expr: &Expr, scope: &Scope, graph: &mut Graph, ctx: LowerContext) -> Result<NodeId, ExprError> {
    let v = Lowerer { scope, graph: &mut *graph, ctx }.value(expr)?;
    match v {
        Value::Node(id) => Ok(id),
        Value::Const(v) => Ok(graph.constant(v)),
    }
}

struct Lowerer<'a> {
    scope: &'a Scope,
    graph: &'a mut Graph,
    ctx: LowerContext,
}

impl Lowerer<'_> {
    fn node(&mut self, v: Value) -> NodeId {
        match v {
            Value::Node(id) => id,
            Value::Const(c) => self.graph.constant(c),
        }
    }

    fn emit(&mut self, op: PrimitiveKind, args: &[Value]) -> Result<Value, ExprError> {
        if args.iter().all(|a| matches!(a, Value::Const(_))) && !op.is_row_reduce() {
            let ms: Vec<Matrix> = args
                .iter()
                .map(|a| if let Value::Const(c) = a { Matrix::scalar(*c) } else { unreachable!() })
                .collect();
            let refs: Vec<&Matrix> = ms.iter().collect();
            return Ok(Value::Const(ops::apply(&op, &refs, (1, 1)).data[0]));
        }
        let ids: Vec<NodeId> = args.iter().map(|&a| self.node(a)).collect();
        Ok(Value::Node(self.graph.add_node(op, &ids)?))
    }

    fn value(&mut self, e: &Expr) -> Result<Value, ExprError> {
        match e {
            Expr::Literal(v) => Ok(Value::Const(*v)),
            Expr::Var(name) => {
                if let Some(id) = self.scope.nodes.get(name) {
                    Ok(Value::Node(*id))
                } else if let Some(c) = self.scope.constants.get(name) {
                    Ok(Value::Const(*c))
                } else {
                    Err(ExprError::UnboundVariable(name.clone()))
                }
            }
            Expr::Unary(UnaryOp::Neg, a) => {
                let a = self.value(a)?;
                self.emit(PrimitiveKind::Neg, &[a])
            }
            Expr::Binary(op, a, b) => {
                let a = self.value(a)?;
                let b = self.value(b)?;
                let op = match op {
                    BinOp::Add => PrimitiveKind::Add,
                    BinOp::Sub => PrimitiveKind::Sub,
                    BinOp::Mul => PrimitiveKind::Mul,
                    BinOp::Div => PrimitiveKind::Div,
                    BinOp::Cmp(c) => PrimitiveKind::Cmp(*c),
                };
                self.emit(op, &[a, b])
            }
            Expr::Call(func, args) => self.call(*func, args),
        }
    }

    fn call(&mut self, func: Func, args: &[Expr]) -> Result<Value, ExprError> {
        if args.len() != func.arity() {
            return Err(ExprError::ArityMismatch { func: func.name().into(), expected: func.arity(), got: args.len() });
        }
        if func.is_reduce() && self.ctx == LowerContext::ElementwiseOnly {
            return Err(ExprError::ReduceInElementwiseContext(func.name().into()));
        }
        if func == Func::Clamp {
            let x = self.value(&args[0])?;
            let (Value::Const(lo), Value::Const(hi)) = (self.value(&args[1])?, self.value(&args[2])?) else {
                return Err(ExprError::NonConstantBound);
            };
            return self.emit(PrimitiveKind::Clamp { lo, hi }, &[x]);
        }
        let vals = args.iter().map(|a| self.value(a)).collect::<Result<Vec<_>, _>>()?;
        let op = match func {
            Func::Exp => PrimitiveKind::Exp,
            Func::Exp2 => PrimitiveKind::Exp2,
            Func::Log => PrimitiveKind::Log,
            Func::Abs => PrimitiveKind::Abs,
            Func::Tanh => PrimitiveKind::Tanh,
            Func::Sigmoid => PrimitiveKind::Sigmoid,
            Func::Sqrt => PrimitiveKind::Sqrt,
            Func::Relu => return self.emit(PrimitiveKind::Max, &[vals[0], Value::Const(0.0)]),
            Func::Max => PrimitiveKind::Max,
            Func::Min => PrimitiveKind::Min,
            Func::Where => PrimitiveKind::Where,
            Func::ReduceSum => PrimitiveKind::ReduceSum,
            Func::ReduceMax => PrimitiveKind::ReduceMax,
            Func::ReduceAbssum => PrimitiveKind::ReduceAbssum,
            Func::Clamp => unreachable!("handled above"),
        };
        self.emit(op, &vals)
    }
}
