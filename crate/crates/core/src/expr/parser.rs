//! Recursive-descent parser.
//!
//! ```text
//! expr     := additive [ cmp_op additive ]     (comparison only as where's condition)
//! additive := term { ("+" | "-") term }
//! term     := unary { ("*" | "/") unary }
//! unary    := "-" unary | primary
//! primary  := NUMBER | "inf" | IDENT | FUNC "(" expr { "," expr } ")" | "(" expr ")"
//! ```

use super::lexer::{Token, TokenKind};
use super::{BinOp, Expr, ExprError, Func, UnaryOp};
use crate::graph::CmpOp;

pub fn parse(tokens: &[Token]) -> Result<Expr, ExprError> {
    let mut p = Parser { tokens, pos: 0 };
    let e = p.expr(false)?;
    if let Some(t) = p.peek() {
        return Err(p.error_at(t, "end of expression"));
    }
    Ok(e)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn peek_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Some(t) if t.kind == TokenKind::Punct && t.text == p)
    }

    fn end_span(&self) -> (usize, usize) {
        let end = self.tokens.last().map(|t| t.span.1).unwrap_or(0);
        (end, end)
    }

    fn error_at(&self, t: &Token, expected: &str) -> ExprError {
        ExprError::Parse { expected: expected.to_string(), found: t.text.clone(), span: t.span }
    }

    fn error_eof(&self, expected: &str) -> ExprError {
        ExprError::Parse { expected: expected.to_string(), found: "end of input".into(), span: self.end_span() }
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), ExprError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Punct && t.text == p => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(self.error_at(t, &format!("`{p}`"))),
            None => Err(self.error_eof(&format!("`{p}`"))),
        }
    }

    fn expr(&mut self, allow_cmp: bool) -> Result<Expr, ExprError> {
        let lhs = self.additive()?;
        let Some(t) = self.peek() else { return Ok(lhs) };
        let op = match t.text.as_str() {
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            _ => return Ok(lhs),
        };
        if !allow_cmp {
            return Err(self.error_at(t, "comparison only inside the condition of where(...)"));
        }
        self.pos += 1;
        let rhs = self.additive()?;
        Ok(Expr::Binary(BinOp::Cmp(op), Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_punct("+") {
                BinOp::Add
            } else if self.peek_punct("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_punct("*") {
                BinOp::Mul
            } else if self.peek_punct("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let op_tok = &self.tokens[self.pos];
            self.pos += 1;
            let rhs = self.unary()?;
            if op == BinOp::Div && matches!(rhs, Expr::Literal(v) if v == 0.0) {
                return Err(ExprError::Parse {
                    expected: "nonzero divisor".into(),
                    found: "0".into(),
                    span: op_tok.span,
                });
            }
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek_punct("-") {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let Some(t) = self.peek() else {
            return Err(self.error_eof("expression"));
        };
        self.pos += 1;
        match t.kind {
            TokenKind::Number => t.text.parse::<f64>().map(Expr::Literal).map_err(|_| self.error_at(t, "number")),
            TokenKind::Ident if t.text == "inf" => Ok(Expr::Literal(f64::INFINITY)),
            TokenKind::Ident => Ok(Expr::Var(t.text.clone())),
            TokenKind::FuncName => {
                let func = Func::from_name(&t.text).expect("lexer classified function");
                self.expect_punct("(")?;
                let mut args = Vec::new();
                loop {
                    let allow_cmp = func == Func::Where && args.is_empty();
                    args.push(self.expr(allow_cmp)?);
                    if self.peek_punct(",") {
                        self.pos += 1;
                        continue;
                    }
                    self.expect_punct(")")?;
                    break;
                }
                if args.len() != func.arity() {
                    return Err(ExprError::ArityMismatch {
                        func: func.name().to_string(),
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            TokenKind::Punct if t.text == "(" => {
                let e = self.expr(false)?;
                self.expect_punct(")")?;
                Ok(e)
            }
            TokenKind::Punct => Err(self.error_at(t, "expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse_str, print};
    use super::*;

    fn var(n: &str) -> Box<Expr> {
        Box::new(Expr::Var(n.into()))
    }

    #[test]
    fn precedence() {
        assert_eq!(
            parse_str("a + b * c").unwrap(),
            Expr::Binary(BinOp::Add, var("a"), Box::new(Expr::Binary(BinOp::Mul, var("b"), var("c"))))
        );
        assert_eq!(
            parse_str("-a * b").unwrap(),
            Expr::Binary(BinOp::Mul, Box::new(Expr::Unary(UnaryOp::Neg, var("a"))), var("b"))
        );
    }

    #[test]
    fn left_associative() {
        let e = parse_str("a - b - c").unwrap();
        assert_eq!(e, Expr::Binary(BinOp::Sub, Box::new(Expr::Binary(BinOp::Sub, var("a"), var("b"))), var("c")));
        assert_eq!(print(&e), "a - b - c");
        assert_eq!(print(&parse_str("a - (b - c)").unwrap()), "a - (b - c)");
    }

    #[test]
    fn abssum_clamp_rownorm() {
        let e = parse_str("scores / clamp(reduceAbssum(scores), 1, inf)").unwrap();
        let Expr::Binary(BinOp::Div, _, rhs) = e else { panic!("expected division") };
        let Expr::Call(Func::Clamp, args) = *rhs else { panic!("expected clamp") };
        assert_eq!(args[0], Expr::Call(Func::ReduceAbssum, vec![Expr::Var("scores".into())]));
        assert_eq!(args[1], Expr::Literal(1.0));
        assert_eq!(args[2], Expr::Literal(f64::INFINITY));
    }

    #[test]
    fn print_parse_fixpoint() {
        for src in [
            "exp(scores - reduceMax(scores))",
            "where(col_idx <= row_idx + seq_k - seq_q, 1, 0)",
            "-(a + b) / -c",
            "clamp(x, -inf, 2.5e-3)",
        ] {
            let once = print(&parse_str(src).unwrap());
            let twice = print(&parse_str(&once).unwrap());
            assert_eq!(once, twice, "{src}");
            assert_eq!(parse_str(&once).unwrap(), parse_str(src).unwrap());
        }
    }

    #[test]
    fn errors_carry_spans() {
        match parse_str("exp(a,") {
            Err(ExprError::Parse { span, .. }) => assert_eq!(span, (6, 6)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_str("a < b"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse_str("max(a)"), Err(ExprError::ArityMismatch { .. })));
        assert!(matches!(parse_str("a / 0"), Err(ExprError::Parse { .. })));
        assert!(matches!(parse_str("a b"), Err(ExprError::Parse { .. })));
        assert!(parse_str("a / 0.5").is_ok());
    }
}
