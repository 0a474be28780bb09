//! Expression mini-language for modification and row-normalization functions.
//!
//! Surface syntax is function-call style: the method chain
//! `scores.abs().reduceSum().clamp(min=1)` is written
//! `clamp(reduceAbssum(scores), 1, inf)`.

mod lexer;
mod lower;
mod parser;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::graph::{CmpOp, GraphError};

pub use lexer::{tokenize, Token, TokenKind};
pub use lower::{lower, LowerContext, Scope};
pub use parser::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Exp2,
    Log,
    Abs,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Max,
    Min,
    Clamp,
    Where,
    ReduceSum,
    ReduceMax,
    ReduceAbssum,
}

impl Func {
    pub const ALL: [Func; 15] = [
        Func::Exp,
        Func::Exp2,
        Func::Log,
        Func::Abs,
        Func::Tanh,
        Func::Sigmoid,
        Func::Relu,
        Func::Sqrt,
        Func::Max,
        Func::Min,
        Func::Clamp,
        Func::Where,
        Func::ReduceSum,
        Func::ReduceMax,
        Func::ReduceAbssum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Exp2 => "exp2",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Sigmoid => "sigmoid",
            Func::Relu => "relu",
            Func::Sqrt => "sqrt",
            Func::Max => "max",
            Func::Min => "min",
            Func::Clamp => "clamp",
            Func::Where => "where",
            Func::ReduceSum => "reduceSum",
            Func::ReduceMax => "reduceMax",
            Func::ReduceAbssum => "reduceAbssum",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            Func::Clamp | Func::Where => 3,
            _ => 1,
        }
    }

    pub fn is_reduce(self) -> bool {
        matches!(self, Func::ReduceSum | Func::ReduceMax | Func::ReduceAbssum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Cmp(CmpOp),
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Cmp(c) => c.symbol(),
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Cmp(_) => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Var(n) = e {
                out.insert(n.clone());
            }
        });
        out
    }

    pub fn mentions(&self, name: &str) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, Expr::Var(n) if n == name));
        found
    }

    pub fn calls(&self, func: Func) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, Expr::Call(f, _) if *f == func));
        found
    }

    pub fn has_reduce(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, Expr::Call(f, _) if f.is_reduce()));
        found
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Literal(_) | Expr::Var(_) => {}
            Expr::Unary(_, a) => a.visit(f),
            Expr::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Unary(..) => 4,
            Expr::Literal(v) if *v < 0.0 => 4,
            _ => 5,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("illegal character {ch:?} at byte {offset}")]
    Lex { offset: usize, ch: char },
    #[error("parse error at bytes {}..{}: expected {expected}, found {found}", span.0, span.1)]
    Parse { expected: String, found: String, span: (usize, usize) },
    #[error("{func} takes {expected} argument(s), got {got}")]
    ArityMismatch { func: String, expected: usize, got: usize },
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("{0} is a row reduction and is not allowed in a modification function")]
    ReduceInElementwiseContext(String),
    #[error("clamp bounds must be constant expressions")]
    NonConstantBound,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub fn parse_str(source: &str) -> Result<Expr, ExprError> {
    parse(&tokenize(source)?)
}

fn fmt_literal(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        // Debug formatting is the shortest round-tripping representation.
        format!("{v:?}")
    }
}

fn print_into(e: &Expr, min_prec: u8, out: &mut String) {
    let paren = e.precedence() < min_prec;
    if paren {
        out.push('(');
    }
    match e {
        Expr::Literal(v) => out.push_str(&fmt_literal(*v)),
        Expr::Var(n) => out.push_str(n),
        Expr::Unary(UnaryOp::Neg, a) => {
            out.push('-');
            print_into(a, 4, out);
        }
        Expr::Binary(op, a, b) => {
            let p = op.precedence();
            let lhs_min = if matches!(op, BinOp::Cmp(_)) { p + 1 } else { p };
            print_into(a, lhs_min, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            print_into(b, p + 1, out);
        }
        Expr::Call(f, args) => {
            out.push_str(f.name());
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                print_into(a, 0, out);
            }
            out.push(')');
        }
    }
    if paren {
        out.push(')');
    }
}

/// Canonical text form with minimal parentheses.
pub fn print(e: &Expr) -> String {
    let mut s = String::new();
    print_into(e, 0, &mut s);
    s
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print(self))
    }
}
